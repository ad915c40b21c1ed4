"""The two desk-scale perception models and their training loop.

``SignDetector`` is a single-class grid detector: three strided convolutions
and a dense head that emits, for each cell of a 4x4 grid, an objectness logit
and four box logits.  ``DistanceRegressor`` shares the convolutional trunk and
ends in two dense layers predicting the lead distance divided by 80 m.

Checkpoints use a small binary container: the magic ``ARWB1`` followed by
tensor records (u32 name length, name, u32 rank, u32 dims, float32 payload,
all little-endian).  The model kind travels as a rank-1 record ``meta.kind``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError, KindMismatchError
from .tensor import Tensor

DETECTOR = "SignDetector"
REGRESSOR = "DistanceRegressor"
DENOISER = "Denoiser"
KIND_CODES = {DETECTOR: 0.0, REGRESSOR: 1.0, DENOISER: 2.0}

INPUT_SIZE = (64, 64, 3)
GRID = 4
CELL = INPUT_SIZE[0] / GRID
DISTANCE_SCALE = 80.0
MAGIC = b"ARWB1"

TRUNK = [
    ("conv", "conv1", (5, 5, 3, 8), 2),
    ("conv", "conv2", (3, 3, 8, 16), 2),
    ("conv", "conv3", (3, 3, 16, 32), 2),
]
FEATURES = 6 * 6 * 32

ARCHS = {
    DETECTOR: TRUNK + [("dense", "head", (FEATURES, GRID * GRID * 5), None)],
    REGRESSOR: TRUNK + [
        ("dense", "fc1", (FEATURES, 32), None),
        ("dense", "fc2", (32, 1), None),
    ],
    # same-size residual denoiser used as the restoration prior
    DENOISER: [
        ("conv", "d1", (3, 3, 3, 16), 1),
        ("conv", "d2", (3, 3, 16, 16), 1),
        ("conv", "d3", (3, 3, 16, 3), 1),
    ],
}


@dataclass
class ModelBundle:
    kind: str
    params: dict
    arch: list = field(default_factory=list)
    input_size: tuple = INPUT_SIZE

    def __post_init__(self):
        if not self.arch:
            self.arch = list(ARCHS[self.kind])
        for _, name, shape, _ in self.arch:
            w, b = self.params.get(f"{name}.w"), self.params.get(f"{name}.b")
            if w is None or b is None or w.shape != shape or b.shape != (shape[-1],):
                raise DimensionError(f"parameter {name} does not match the {self.kind} architecture")
        if len(self.params) != 2 * len(self.arch):
            raise DimensionError("unexpected extra parameters")

    def copy(self):
        return ModelBundle(self.kind, {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()}, list(self.arch))

    def checksum(self):
        return hashlib.sha256(to_bytes(self)).hexdigest()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def init_model(kind, seed=0, zero=False):
    """He-initialised (or all-zero) parameters for ``kind``."""
    if kind not in ARCHS:
        raise ContractError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for layer, name, shape, _ in ARCHS[kind]:
        fan_in = int(np.prod(shape[:-1]))
        w = np.zeros(shape) if zero else rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(shape[-1]), requires_grad=True)
    if kind == REGRESSOR and not zero:
        params["fc2.w"].data *= 0.1
        params["fc2.b"].data[:] = 0.5
    if kind == DENOISER and not zero:
        params["d3.w"].data *= 0.1
    return ModelBundle(kind, params)


def _as_input(image):
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.shape[-3:] != INPUT_SIZE or x.ndim not in (3, 4):
        raise DimensionError(f"expected 64x64x3 image(s), got {x.shape}")
    return x


def features(model, x):
    """Flattened trunk activations, shape (N, FEATURES)."""
    h = x if x.ndim == 4 else T.reshape(x, (1,) + x.shape)
    for layer, name, _, stride in model.arch:
        if layer != "conv":
            break
        h = T.relu(T.add_bias(T.conv2d(h, model.params[f"{name}.w"], stride), model.params[f"{name}.b"]))
    return T.reshape(h, (h.shape[0], -1))


def _dense_layers(model):
    return [name for layer, name, _, _ in model.arch if layer == "dense"]


def head(model, feats):
    names = _dense_layers(model)
    h = feats
    for i, name in enumerate(names):
        h = T.dense(h, model.params[f"{name}.w"], model.params[f"{name}.b"])
        if i < len(names) - 1:
            h = T.relu(h)
    return h


# ---------------------------------------------------------------------------
# detector


@dataclass
class Detection:
    box: tuple
    score: float


@dataclass
class GridPrediction:
    """Raw head output, shape (S, S, 5) or (N, S, S, 5): objectness then box logits."""

    raw: Tensor

    @property
    def objectness(self):
        return T._sigmoid(self.raw.data[..., 0].astype(np.float64))

    def boxes(self):
        """Decoded (cx, cy, w, h) per cell, clamped to the image."""
        return decode_boxes(self.raw.data)


def detector_logits(model, image):
    if model.kind != DETECTOR:
        raise ContractError("detector_forward needs a SignDetector")
    x = _as_input(image)
    out = head(model, features(model, x))
    return T.reshape(out, (out.shape[0], GRID, GRID, 5))


def detector_forward(model, image):
    raw = detector_logits(model, image)
    if _as_input(image).ndim == 3:
        raw = T.reshape(raw, (GRID, GRID, 5))
    return GridPrediction(raw)


def decode_boxes(raw):
    raw = np.asarray(raw, dtype=np.float64)
    s = T._sigmoid(raw[..., 1:5])
    jj, ii = np.meshgrid(np.arange(GRID), np.arange(GRID))
    cx = (jj + s[..., 0]) * CELL
    cy = (ii + s[..., 1]) * CELL
    w = s[..., 2] * INPUT_SIZE[1]
    h = s[..., 3] * INPUT_SIZE[0]
    x0 = np.clip(cx - w / 2, 0, INPUT_SIZE[1])
    x1 = np.clip(cx + w / 2, 0, INPUT_SIZE[1])
    y0 = np.clip(cy - h / 2, 0, INPUT_SIZE[0])
    y1 = np.clip(cy + h / 2, 0, INPUT_SIZE[0])
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, np.maximum(x1 - x0, 1e-3), np.maximum(y1 - y0, 1e-3)], axis=-1)


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def nms(detections, iou_threshold):
    """Greedy non-maximum suppression over detections sorted by score."""
    ordered = sorted(detections, key=lambda d: -d.score)
    keep = []
    for d in ordered:
        if all(box_iou(d.box, k.box) <= iou_threshold for k in keep):
            keep.append(d)
    return keep


def decode_detections(pred, conf_threshold=0.25, nms_iou=0.5):
    """Detections of one image with score >= ``conf_threshold`` after NMS."""
    if not (0 <= conf_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ContractError("thresholds must lie in [0, 1]")
    raw = pred.raw.data if isinstance(pred, GridPrediction) else np.asarray(pred)
    if raw.shape != (GRID, GRID, 5):
        raise DimensionError("decode_detections handles one image at a time")
    scores = T._sigmoid(raw[..., 0].astype(np.float64))
    boxes = decode_boxes(raw)
    dets = [Detection(tuple(float(v) for v in boxes[i, j]), float(scores[i, j]))
            for i in range(GRID) for j in range(GRID) if scores[i, j] >= conf_threshold]
    return nms(dets, nms_iou)


def detect(model, images, conf_threshold=0.001, nms_iou=0.5, chunk=256):
    """Batched inference returning one detection list per image."""
    raws = []
    for start in range(0, len(images), chunk):
        raws.append(detector_logits(model, np.asarray(images[start:start + chunk], dtype=np.float32)).data)
    raw = np.concatenate(raws)
    return [decode_detections(r, conf_threshold, nms_iou) for r in raw]


def max_objectness(model, images, chunk=256):
    out = []
    for start in range(0, len(images), chunk):
        raw = detector_logits(model, np.asarray(images[start:start + chunk], dtype=np.float32)).data
        out.append(T._sigmoid(raw[..., 0].reshape(len(raw), -1).astype(np.float64)).max(axis=1))
    return np.concatenate(out)


def grid_targets(boxes):
    """Objectness targets (N,S,S) and box targets (N,S,S,4) in sigmoid space."""
    n = len(boxes)
    obj = np.zeros((n, GRID, GRID))
    box = np.zeros((n, GRID, GRID, 4))
    for k, b in enumerate(boxes):
        if b is None:
            continue
        cx, cy, w, h = b
        j = min(GRID - 1, int(cx // CELL))
        i = min(GRID - 1, int(cy // CELL))
        obj[k, i, j] = 1.0
        box[k, i, j] = (cx / CELL - j, cy / CELL - i, w / INPUT_SIZE[1], h / INPUT_SIZE[0])
    return obj, box


BOX_WEIGHT = 5.0


def detector_loss(model, images, boxes):
    """Per-image loss, shape (N,): mean objectness BCE plus box error on the positive cell."""
    raw = detector_logits(model, images)
    obj_t, box_t = grid_targets(boxes)
    n = raw.shape[0]
    bce = T.bce_with_logits(raw[..., 0], obj_t)
    obj_loss = T.mul(T.tsum(bce, axis=(1, 2)), 1.0 / (GRID * GRID))
    pos = np.broadcast_to(obj_t[..., None], box_t.shape).astype(raw.dtype)
    err = T.square(T.sub(T.sigmoid(raw[..., 1:5]), box_t.astype(raw.dtype)))
    box_loss = T.tsum(T.reshape(T.mul(err, pos), (n, -1)), axis=1)
    return T.add(obj_loss, T.mul(box_loss, BOX_WEIGHT))


def suppression_loss(model, images):
    """Per-image BCE of every cell's objectness towards 0 (the "no sign" label)."""
    raw = detector_logits(model, images)
    bce = T.bce_with_logits(raw[..., 0], np.zeros(raw.shape[:3]))
    return T.mul(T.tsum(bce, axis=(1, 2)), 1.0 / (GRID * GRID))


# ---------------------------------------------------------------------------
# regressor


def regressor_raw(model, image):
    if model.kind != REGRESSOR:
        raise ContractError("regressor_forward needs a DistanceRegressor")
    x = _as_input(image)
    return T.reshape(head(model, features(model, x)), (-1,))


def regressor_forward(model, image):
    """Predicted lead distance in metres: scalar for one image, (N,) for a batch."""
    x = _as_input(image)
    out = T.mul(regressor_raw(model, x), DISTANCE_SCALE)
    return T.reshape(out, ()) if x.ndim == 3 else out


def predict_distance(model, images, chunk=256):
    out = []
    for start in range(0, len(images), chunk):
        out.append(regressor_forward(model, np.asarray(images[start:start + chunk], dtype=np.float32)).data)
    return np.concatenate(out).astype(np.float64)


def regressor_loss(model, images, distances):
    raw = regressor_raw(model, images)
    target = (np.asarray(distances) / DISTANCE_SCALE).astype(raw.dtype)
    return T.square(T.sub(raw, target))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    initial_loss: float | None = None

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else self.initial_loss


def task_targets(model, data):
    if model.kind == DETECTOR:
        return data.boxes()
    return data.distances()


def task_loss(model, images, targets):
    if model.kind == DETECTOR:
        return detector_loss(model, images, targets)
    return regressor_loss(model, images, targets)


def _take(targets, idx):
    if isinstance(targets, np.ndarray):
        return targets[idx]
    return [targets[i] for i in idx]


def flip_augment(x, y, rng):
    """Random horizontal and vertical mirroring of a detector batch and its boxes."""
    x = np.array(x)
    y = list(y)
    flips = rng.integers(0, 2, (len(x), 2))
    for k, (fh, fv) in enumerate(flips):
        if fh:
            x[k] = x[k, :, ::-1]
        if fv:
            x[k] = x[k, ::-1]
        if y[k] is not None:
            cx, cy, w, h = y[k]
            y[k] = (INPUT_SIZE[1] - cx if fh else cx, INPUT_SIZE[0] - cy if fv else cy, w, h)
    return x, y


def fit(model, images, targets, epochs, lr, seed, batch_size=32, perturb=None, params=None, loss_fn=None,
        augment=None):
    """Mini-batch Adam training loop shared by plain and adversarial training.

    ``augment(x, y, rng)`` and ``perturb(model, x, y, rng)`` may replace each
    batch before the descent step; each draws from its own generator so
    neither shifts the batch order.
    """
    report = TrainReport()
    if epochs <= 0:
        return report
    loss_fn = loss_fn or task_loss
    opt = T.Adam(params if params is not None else model.params, lr=lr)
    order_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    attack_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    aug_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    n = len(images)
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            x = images[idx]
            y = _take(targets, idx)
            if augment is not None:
                x, y = augment(x, y, aug_rng)
            if perturb is not None:
                x = perturb(model, x, y, attack_rng)
            model.zero_grad()
            loss = T.mean(loss_fn(model, x.astype(np.float32), y))
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        report.losses.append(total / count)
    return report


def dataset_loss(model, images, targets, chunk=256):
    total = 0.0
    for start in range(0, len(images), chunk):
        sl = slice(start, start + chunk)
        total += float(np.sum(task_loss(model, images[sl], _take(targets, range(*sl.indices(len(images))))).data, dtype=np.float64))
    return total / len(images)


def default_augment(model):
    return flip_augment if model.kind == DETECTOR else None


def train(model, data, epochs, lr, seed, batch_size=32):
    """Fit ``model`` in place on a dataset manifest; returns the loss curve."""
    if len(data) == 0:
        raise ContractError("train needs a non-empty dataset")
    images = data.images()
    targets = task_targets(model, data)
    report = fit(model, images, targets, epochs, lr, seed, batch_size, augment=default_augment(model))
    if epochs > 0:
        report.initial_loss = report.losses[0]
    return report


# ---------------------------------------------------------------------------
# checkpoints


def _record(name, array):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    head_ = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head_ + arr.tobytes()


def to_bytes(model):
    parts = [MAGIC, _record("meta.kind", np.array([KIND_CODES[model.kind]]))]
    for name in sorted(model.params):
        parts.append(_record(name, model.params[name].data))
    return b"".join(parts)


def from_bytes(blob, kind=None):
    if not blob.startswith(MAGIC):
        raise FormatError("bad checkpoint magic")
    pos = len(MAGIC)
    records = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        records[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if "meta.kind" not in records:
        raise FormatError("checkpoint lacks meta.kind")
    code = float(records.pop("meta.kind")[0])
    stored = {v: k for k, v in KIND_CODES.items()}.get(code)
    if stored is None:
        raise FormatError(f"unknown model kind code {code}")
    if kind is not None and kind != stored:
        raise KindMismatchError(f"checkpoint holds a {stored}, not a {kind}")
    return ModelBundle(stored, {k: Tensor(v, requires_grad=True) for k, v in records.items()})


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load(path, kind=None):
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), kind)
