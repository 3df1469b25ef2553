"""A small PointNet-style classifier trained with hand-written gradients.

Architecture: a shared per-point MLP 3 -> 64 -> 128 -> 256 (ReLU), a
channel-wise max over points, then a head 256 -> 128 (ReLU) -> C. All
arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import make_rng
from .preprocess import PipelineSpec, run_pipeline

log = logging.getLogger(__name__)

POINT_WIDTHS = (3, 64, 128, 256)
HEAD_WIDTHS = (256, 128)
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4", "W5", "b5")


class StaleCacheError(RuntimeError):
    """A forward cache was used after the weights it was computed with changed."""


@dataclass
class TinyModel:
    params: dict
    n_classes: int
    version: int = 0

    def __post_init__(self):
        expected = expected_shapes(self.n_classes, self.widths)
        for name in PARAM_NAMES:
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            if self.params[name].shape != expected[name]:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {expected[name]}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def widths(self):
        p = self.params
        return (3, p["W1"].shape[1], p["W2"].shape[1], p["W3"].shape[1], p["W4"].shape[1])

    def logits(self, clouds) -> np.ndarray:
        return forward(self, clouds)[0]

    def predict(self, cloud) -> int:
        return int(np.argmax(forward(self, cloud)[0][0]))

    def predict_batch(self, clouds) -> np.ndarray:
        return np.argmax(forward(self, clouds)[0], axis=1)

    def features(self, cloud) -> np.ndarray:
        """The max-pooled global feature vector of one cloud."""
        return forward(self, cloud)[1].pooled[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


def expected_shapes(n_classes: int, widths=None) -> dict:
    d0, d1, d2, d3, d4 = widths or (*POINT_WIDTHS, HEAD_WIDTHS[1])
    return {
        "W1": (d0, d1), "b1": (d1,),
        "W2": (d1, d2), "b2": (d2,),
        "W3": (d2, d3), "b3": (d3,),
        "W4": (d3, d4), "b4": (d4,),
        "W5": (d4, n_classes), "b5": (n_classes,),
    }


def init_model(n_classes: int, rng: np.random.Generator, widths=None) -> TinyModel:
    """Glorot-uniform weights, zero biases."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    params = {}
    for name, shape in expected_shapes(n_classes, widths).items():
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return TinyModel(params, n_classes)


@dataclass
class ForwardCache:
    x: np.ndarray        # (B*K, 3)
    h1: np.ndarray       # (B*K, d1), post-ReLU
    h2: np.ndarray       # (B*K, d2), post-ReLU
    argmax: np.ndarray   # (B, d3) winning point per channel
    pooled: np.ndarray   # (B, d3)
    z: np.ndarray        # (B, d4), post-ReLU
    logits: np.ndarray   # (B, C)
    n_points: int
    version: int


def _as_batch(clouds) -> np.ndarray:
    x = np.asarray(clouds, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[1] < 1:
        raise ValueError(f"expected (K, 3) or (B, K, 3) input, got shape {x.shape}")
    return x


def forward(model: TinyModel, clouds):
    """Logits ``(B, C)`` and the activations needed by :func:`backward`."""
    x = _as_batch(clouds)
    b, k, _ = x.shape
    p = model.params
    flat = x.reshape(b * k, 3)
    h1 = np.maximum(flat @ p["W1"] + p["b1"], 0.0)
    h2 = np.maximum(h1 @ p["W2"] + p["b2"], 0.0)
    a3 = (h2 @ p["W3"] + p["b3"]).reshape(b, k, -1)
    # relu is monotone, so pooling pre-activations and clamping afterwards
    # equals max-pooling relu(a3); argmax takes the first (lowest) index on ties
    arg = np.argmax(a3, axis=1)
    pooled = np.maximum(np.take_along_axis(a3, arg[:, None, :], axis=1)[:, 0, :], 0.0)
    z = np.maximum(pooled @ p["W4"] + p["b4"], 0.0)
    logits = z @ p["W5"] + p["b5"]
    cache = ForwardCache(flat, h1, h2, arg, pooled, z, logits, k, model.version)
    return logits, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def backward(model: TinyModel, cache: ForwardCache, labels):
    """Gradients of the batch-mean cross-entropy; returns ``(grads, loss)``.

    The max-pool passes gradient only to the winning point of each channel,
    so the per-point layers are back-propagated through those rows alone.
    """
    if cache.version != model.version:
        raise StaleCacheError("forward cache predates the current weights")
    p = model.params
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = cache.logits.shape
    if len(labels) != b:
        raise ValueError(f"{len(labels)} labels for a batch of {b}")
    logp = log_softmax(cache.logits)
    loss = float(-logp[np.arange(b), labels].mean())
    d_logits = np.exp(logp)
    d_logits[np.arange(b), labels] -= 1.0
    d_logits /= b

    g = {}
    g["W5"] = cache.z.T @ d_logits
    g["b5"] = d_logits.sum(axis=0)
    dz = (d_logits @ p["W5"].T) * (cache.z > 0)
    g["W4"] = cache.pooled.T @ dz
    g["b4"] = dz.sum(axis=0)
    d_pooled = (dz @ p["W4"].T) * (cache.pooled > 0)

    d3 = d_pooled.shape[1]
    flat_rows = cache.argmax + (np.arange(b) * cache.n_points)[:, None]   # (B, d3)
    rows, inverse = np.unique(flat_rows, return_inverse=True)
    inverse = inverse.reshape(b, d3)
    da3 = np.zeros((len(rows), d3))
    da3[inverse, np.broadcast_to(np.arange(d3), (b, d3))] = d_pooled

    h2 = cache.h2[rows]
    h1 = cache.h1[rows]
    g["W3"] = h2.T @ da3
    g["b3"] = da3.sum(axis=0)
    da2 = (da3 @ p["W3"].T) * (h2 > 0)
    g["W2"] = h1.T @ da2
    g["b2"] = da2.sum(axis=0)
    da1 = (da2 @ p["W2"].T) * (h1 > 0)
    g["W1"] = cache.x[rows].T @ da1
    g["b1"] = da1.sum(axis=0)
    return g, loss


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(model: TinyModel, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name in PARAM_NAMES:
        gr = grads[name]
        w = model.params[name]
        if gr.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {gr.shape}, weight has {w.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * gr
        v *= state.beta2
        v += (1.0 - state.beta2) * (gr * gr)
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    model.version += 1
    return model, state


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    pipeline: PipelineSpec = field(default_factory=PipelineSpec)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float


def train(dataset, config: TrainConfig, model: TinyModel | None = None):
    """Mini-batch Adam on (pipeline-processed) training clouds.

    Randomness is keyed off ``config.seed``: init ``(seed, 0)``, shuffling
    ``(seed, 1, epoch)``, and sample ``i``'s pipeline ``(seed, 2, i)``.
    Leading deterministic pipeline steps (SOR) are computed once per sample.
    Returns ``(model, state, epoch_logs)``.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    seed = config.seed
    if model is None:
        model = init_model(dataset.n_classes, make_rng(seed, 0))
    state = AdamState(lr=config.lr)
    pipeline = config.pipeline
    n_cached = pipeline.deterministic_prefix()
    if n_cached:
        prefix = PipelineSpec(pipeline.steps[:n_cached])
        base = [run_pipeline(c, prefix, make_rng(seed, 2, i)) for i, c in enumerate(dataset.clouds)]
    else:
        base = [np.asarray(c, dtype=np.float64) for c in dataset.clouds]
    needs_pipeline = n_cached < len(pipeline)
    labels = dataset.labels
    logs = []
    for epoch in range(config.epochs):
        order = make_rng(seed, 1, epoch).permutation(n)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            if needs_pipeline:
                clouds = [
                    run_pipeline(base[i], pipeline, make_rng(seed, 2, i), epoch=epoch, skip=n_cached) for i in idx
                ]
            else:
                clouds = [base[i] for i in idx]
            sizes = {len(c) for c in clouds}
            if len(sizes) != 1:
                raise ValueError(f"pipeline produced clouds of different sizes {sorted(sizes)}")
            batch = np.stack(clouds)
            logits, cache = forward(model, batch)
            grads, loss = backward(model, cache, labels[idx])
            adam_step(model, grads, state)
            total_loss += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == labels[idx]).sum())
        entry = EpochLog(epoch + 1, total_loss / n, correct / n)
        logs.append(entry)
        log.debug("epoch %d loss %.5f acc %.3f", entry.epoch, entry.loss, entry.train_acc)
    return model, state, logs


# -- checkpoint format ---------------------------------------------------------
#
# magic b"PCBDCKPT" | u32 version | u32 n_classes | u32 n_arrays | u32 has_adam
# then per array: u32 ndim, u32 dims..., float64 LE data
# optional Adam block: u64 step, f64 lr, beta1, beta2, eps, then m and v arrays
# in PARAM_NAMES order (same per-array layout)

CKPT_MAGIC = b"PCBDCKPT"
CKPT_VERSION = 1


def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh):
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = fh.read(8 * count)
    if len(data) != 8 * count:
        raise ValueError("truncated checkpoint")
    return np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)


def save_checkpoint(path, model: TinyModel, state: AdamState | None = None):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IIII", CKPT_VERSION, model.n_classes, len(PARAM_NAMES), int(state is not None)))
        for name in PARAM_NAMES:
            _write_array(fh, model.params[name])
        if state is not None:
            fh.write(struct.pack("<Q4d", state.step, state.lr, state.beta1, state.beta2, state.eps))
            for moments in (state.m, state.v):
                for name in PARAM_NAMES:
                    _write_array(fh, moments.get(name, np.zeros_like(model.params[name])))


def load_checkpoint(path):
    """Returns ``(model, adam_state_or_None)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, n_classes, n_arrays, has_adam = struct.unpack("<IIII", fh.read(16))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        if n_arrays != len(PARAM_NAMES):
            raise ValueError(f"{path}: expected {len(PARAM_NAMES)} arrays, found {n_arrays}")
        params = {name: _read_array(fh) for name in PARAM_NAMES}
        state = None
        if has_adam:
            step, lr, b1, b2, eps = struct.unpack("<Q4d", fh.read(40))
            m = {name: _read_array(fh) for name in PARAM_NAMES}
            v = {name: _read_array(fh) for name in PARAM_NAMES}
            state = AdamState(lr, b1, b2, eps, step, m, v)
    return TinyModel(params, n_classes), state
