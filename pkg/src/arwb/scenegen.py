"""Deterministic synthetic scenes: stop-sign images and lead-vehicle road frames.

Every generator is a pure function of its parameters and seed.  Per-scene
randomness comes from ``SeedSequence(seed, spawn_key=(split, index))`` so
train and test splits never share a stream and scenes can be produced in
any order.

Road frames follow a pinhole rule: the lead vehicle's apparent width is
``round(CAMERA_K / distance)`` pixels, clamped to :data:`MAX_WIDTH`.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

SIZE = 64
CAMERA_K = 800.0
MAX_WIDTH = 56
MIN_DISTANCE = 5.0
MAX_DISTANCE = 80.0
HORIZON = 22
POSITIVE_RATIO = 0.7

_SPLIT_KEYS = {"train": 0, "test": 1}


@dataclass
class SignScene:
    image: np.ndarray
    gt_box: tuple | None
    has_sign: bool
    mask: np.ndarray | None = None


@dataclass
class RoadScene:
    image: np.ndarray
    distance_m: float
    lead_box: tuple
    clamped: bool = False


@dataclass
class DatasetManifest:
    kind: str
    entries: list
    split: str = "train"
    seed: int = 0
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def images(self):
        return np.stack([e.image for e in self.entries]).astype(np.float32)

    def boxes(self):
        if self.kind == "sign":
            return [e.gt_box if e.has_sign else None for e in self.entries]
        return [e.lead_box for e in self.entries]

    def distances(self):
        return np.array([e.distance_m for e in self.entries], dtype=np.float64)

    def subset(self, indices):
        idx = list(indices)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return DatasetManifest(self.kind, [self.entries[i] for i in idx], self.split, self.seed, paths)


def _scene_rng(seed, split, index):
    ss = np.random.SeedSequence(seed, spawn_key=(_SPLIT_KEYS[split], index))
    return np.random.default_rng(ss)


def _upsample(grid, size=SIZE):
    """Bilinear upsampling of a small (g, g, c) grid to (size, size, c)."""
    g = grid.shape[0]
    pos = np.linspace(0, g - 1, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, g - 2)
    t = (pos - i0)[:, None]
    rows = grid[i0] * (1 - t)[..., None] + grid[i0 + 1] * t[..., None]
    cols = rows[:, i0] * (1 - t.T)[..., None] + rows[:, i0 + 1] * t.T[..., None]
    return cols


def smooth_noise(rng, amplitude, cells=5):
    return (_upsample(rng.uniform(-1, 1, (cells, cells, 3))) * amplitude).astype(np.float32)


def octagon_mask(cx, cy, radius, size=SIZE):
    """Pixels whose centres fall inside a regular octagon with flat top and sides."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    apothem = radius * np.cos(np.pi / 8)
    inside = np.ones((size, size), dtype=bool)
    for k in range(8):
        a = k * np.pi / 4
        inside &= dx * np.cos(a) + dy * np.sin(a) <= apothem
    return inside


def _mask_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, float(x1 - x0), float(y1 - y0))


def _muted_color(rng):
    c = rng.uniform(0.1, 0.8, 3)
    if c[0] > max(c[1], c[2]) + 0.1:
        c[0], c[1] = c[1], c[0]
    return c


def _sign_background(rng):
    base = rng.uniform(0.25, 0.65, 3)
    img = np.broadcast_to(base, (SIZE, SIZE, 3)) + smooth_noise(rng, 0.15)
    img = np.array(img, dtype=np.float32)
    for _ in range(rng.integers(2, 6)):
        w, h = rng.integers(4, 20, 2)
        x0, y0 = rng.integers(0, SIZE - 4, 2)
        img[y0:y0 + h, x0:x0 + w] = _muted_color(rng)
    return img


def render_sign_scene(rng, has_sign):
    img = _sign_background(rng)
    if not has_sign:
        return SignScene(np.clip(img, 0, 1).astype(np.float32), None, False, None)
    radius = rng.uniform(7.5, 15.0)
    margin = radius + 1.0
    cx, cy = rng.uniform(margin, SIZE - margin, 2)
    mask = octagon_mask(cx, cy, radius)
    red = np.array([rng.uniform(0.7, 0.95), rng.uniform(0.0, 0.15), rng.uniform(0.0, 0.18)])
    img[mask] = red
    # white legend bar across the middle of the sign
    band = mask & (np.abs(np.arange(SIZE)[:, None] + 0.5 - cy) < radius * 0.18)
    band &= np.abs(np.arange(SIZE)[None, :] + 0.5 - cx) < radius * 0.6
    img[band] = rng.uniform(0.85, 1.0)
    img += rng.normal(0, 0.01, img.shape).astype(np.float32)
    return SignScene(np.clip(img, 0, 1).astype(np.float32), _mask_box(mask), True, mask)


def positive_count(n):
    """Number of sign-bearing scenes among ``n``: round half up of 0.7 n."""
    return int(np.floor(POSITIVE_RATIO * n + 0.5))


def generate_sign_dataset(n, seed, split="train"):
    """``n`` stop-sign scenes, about 70% with a sign, deterministic per seed."""
    if n < 1:
        raise ContractError("generate_sign_dataset needs n >= 1")
    if split not in _SPLIT_KEYS:
        raise ContractError(f"unknown split {split!r}")
    order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SPLIT_KEYS[split] + 10,))).permutation(n)
    positive = np.zeros(n, dtype=bool)
    positive[order[:positive_count(n)]] = True
    entries = [render_sign_scene(_scene_rng(seed, split, i), bool(positive[i])) for i in range(n)]
    return DatasetManifest("sign", entries, split, seed)


# ---------------------------------------------------------------------------
# road scenes


def lead_geometry(distance_m, lateral=0.0):
    """Pixel box (cx, cy, w, h) of the lead vehicle and whether the width was clamped.

    Width follows ``round(K / d)`` up to :data:`MAX_WIDTH`; the vertical extent
    follows the same projection and is cut at the image border.
    """
    raw = int(round(CAMERA_K / distance_m))
    width = min(raw, MAX_WIDTH)
    h_raw = 0.75 * CAMERA_K / distance_m
    bottom = min(SIZE, int(round(HORIZON + 0.4 * h_raw)))
    top = max(0, int(round(HORIZON + 0.4 * h_raw - h_raw)))
    x0 = int(round(SIZE / 2 + lateral - width / 2))
    return (x0 + width / 2.0, (top + bottom) / 2.0, float(width), float(bottom - top)), raw > MAX_WIDTH


def _road_style(rng):
    return {
        "sky": rng.uniform(0.55, 0.85, 3) * np.array([0.8, 0.9, 1.0]),
        "road": rng.uniform(0.3, 0.5),
        "body": rng.choice([[0.15, 0.15, 0.18], [0.25, 0.3, 0.45], [0.55, 0.55, 0.58], [0.35, 0.2, 0.15]]),
        "noise": smooth_noise(rng, 0.06),
        "dash_phase": rng.uniform(0, 8),
    }


def render_road_scene(style, distance_m, lateral, rng):
    img = np.empty((SIZE, SIZE, 3), dtype=np.float32)
    img[:HORIZON] = style["sky"]
    img[HORIZON:] = style["road"]
    ys = np.arange(SIZE)[:, None] + 0.5
    xs = np.arange(SIZE)[None, :] + 0.5
    # grass verges outside a road trapezoid
    half = 3 + (ys - HORIZON) * 0.9
    verge = (ys >= HORIZON) & (np.abs(xs - SIZE / 2) > half)
    img[verge] = (0.25, 0.45, 0.2)
    for side in (-1, 1):
        lane = (ys >= HORIZON) & (np.abs(xs - (SIZE / 2 + side * 0.55 * half)) < 0.6 + (ys - HORIZON) * 0.03)
        dash = ((ys - HORIZON) * 0.4 + style["dash_phase"]) % 4 < 2
        img[lane & dash] = 0.9
    img += style["noise"]

    box, clamped = lead_geometry(distance_m, lateral)
    cx, cy, w, h = box
    x0, x1 = int(round(cx - w / 2)), int(round(cx + w / 2))
    y0, y1 = int(round(cy - h / 2)), int(round(cy + h / 2))
    img[y1:min(SIZE, y1 + max(1, int(h) // 8)), x0:x1] *= 0.5
    img[y0:y1, x0:x1] = style["body"]
    wy1 = y0 + max(1, int(round(h * 0.35)))
    inset = max(1, int(round(w * 0.15)))
    img[y0 + max(1, int(h) // 10):wy1, x0 + inset:x1 - inset] = (0.6, 0.7, 0.8)
    lh = max(1, int(round(h * 0.15)))
    lw = max(1, int(round(w * 0.15)))
    ly = y0 + int(round(h * 0.55))
    img[ly:ly + lh, x0:x0 + lw] = (0.9, 0.1, 0.1)
    img[ly:ly + lh, x1 - lw:x1] = (0.9, 0.1, 0.1)
    img += rng.normal(0, 0.01, img.shape).astype(np.float32)
    return RoadScene(np.clip(img, 0, 1).astype(np.float32), float(distance_m), box, clamped)


def _check_distance(d):
    if not MIN_DISTANCE <= d <= MAX_DISTANCE:
        raise ContractError(f"distance {d} outside [{MIN_DISTANCE}, {MAX_DISTANCE}] m")


def generate_road_sequence(frames, d0, d1, seed):
    """A video-like sequence whose lead distance moves linearly from d0 to d1."""
    _check_distance(d0)
    _check_distance(d1)
    if frames < 1:
        raise ContractError("frames must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    style = _road_style(rng)
    drift = rng.uniform(-3, 3, 2)
    scenes = []
    for i in range(frames):
        t = i / (frames - 1) if frames > 1 else 0.0
        d = d0 + (d1 - d0) * t
        lateral = drift[0] + (drift[1] - drift[0]) * t
        scenes.append(render_road_scene(style, d, lateral, _scene_rng(seed, "test", i)))
    return scenes


def generate_road_dataset(n, seed, split="train"):
    """``n`` independent road frames with distances uniform on [5, 80] m."""
    if n < 1:
        raise ContractError("generate_road_dataset needs n >= 1")
    entries = []
    for i in range(n):
        rng = _scene_rng(seed, split, i)
        style = _road_style(rng)
        d = rng.uniform(MIN_DISTANCE, MAX_DISTANCE)
        entries.append(render_road_scene(style, d, rng.uniform(-3, 3), rng))
    return DatasetManifest("road", entries, split, seed)


def sequence_manifest(scenes, seed=0):
    return DatasetManifest("road", list(scenes), "test", seed)


# ---------------------------------------------------------------------------
# P6 portable pixmap I/O


def encode_ppm(image, comment=None):
    """Binary PPM (P6, maxval 255) bytes of an HxWx3 image in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    payload = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).tobytes()
    if comment:
        header = f"P6\n# {comment}\n{w} {h} 255\n"
    else:
        header = f"P6 {w} {h} 255\n"
    return header.encode("ascii") + payload


def decode_ppm(data):
    """Inverse of :func:`encode_ppm`; comments in the header are skipped."""
    if not data.startswith(b"P6"):
        raise FormatError("not a P6 pixmap")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        if pos >= len(data):
            raise FormatError("truncated PPM header")
        c = data[pos:pos + 1]
        if c == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated PPM comment")
            pos = end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError("non-numeric PPM header field") from None
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError("PPM must have positive size and maxval 255")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PPM header")
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise FormatError("truncated PPM payload")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return (arr.reshape(h, w, 3).astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# on-disk datasets: PPM files plus a manifest CSV

SIGN_COLUMNS = ["path", "has_sign", "cx", "cy", "w", "h"]
ROAD_COLUMNS = ["path", "distance_m", "cx", "cy", "w", "h", "clamped"]


def write_dataset(manifest, directory, comment=None):
    """Write ``images/NNNNN.ppm`` and ``manifest.csv``; returns the manifest path."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SIGN_COLUMNS if manifest.kind == "sign" else ROAD_COLUMNS)
    for i, e in enumerate(manifest.entries):
        rel = f"images/{i:05d}.ppm"
        with open(os.path.join(directory, rel), "wb") as fh:
            fh.write(encode_ppm(e.image, comment))
        if manifest.kind == "sign":
            box = e.gt_box if e.has_sign else (0, 0, 0, 0)
            writer.writerow([rel, int(e.has_sign)] + [repr(float(v)) for v in box])
        else:
            writer.writerow([rel, repr(e.distance_m)] + [repr(float(v)) for v in e.lead_box] + [int(e.clamped)])
    path = os.path.join(directory, "manifest.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def read_dataset(directory, split="test"):
    """Load a directory written by :func:`write_dataset` (or laid out the same way)."""
    path = os.path.join(directory, "manifest.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    kind = "sign" if reader.fieldnames and "has_sign" in reader.fieldnames else "road"
    entries, paths = [], []
    for row in reader:
        with open(os.path.join(directory, row["path"]), "rb") as fh:
            image = decode_ppm(fh.read())
        box = tuple(float(row[k]) for k in ("cx", "cy", "w", "h"))
        if kind == "sign":
            has = row["has_sign"] == "1"
            entries.append(SignScene(image, box if has else None, has, None))
        else:
            entries.append(RoadScene(image, float(row["distance_m"]), box, row.get("clamped") == "1"))
        paths.append(row["path"])
    if not entries:
        raise ContractError(f"empty dataset at {directory}")
    return DatasetManifest(kind, entries, split, 0, paths)
