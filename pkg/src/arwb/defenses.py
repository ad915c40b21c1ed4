"""Input processing, min-max adversarial training, contrastive training and
diffusion-style restoration.

Input defenses are pure functions of an HxWx3 (or NxHxWx3) image in [0, 1].
Training defenses return a new model and a training report; the model passed
in is never modified.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import attacks as A
from . import models as M
from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

KINDS = ("None", "MedianBlur", "BitDepth", "Randomize", "AdvTrain", "Contrastive", "DiffPIR")
INPUT_KINDS = ("None", "MedianBlur", "BitDepth", "Randomize", "DiffPIR")
INNER_ATTACKS = ("fgsm", "autopgd", "gaussian", "patch", "mixed")


@dataclass
class DefenseConfig:
    kind: str = "None"
    k: int = 3
    bits: int = 3
    resize_range: tuple = (54, 64)
    noise: float = 1 / 255
    inner: A.Budget = field(default_factory=lambda: A.Budget(epsilon=8 / 255, alpha=2 / 255, max_iters=5))
    inner_attack: str = "fgsm"
    tau: float = 0.5
    schedule: str = "default"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown defense {self.kind!r}; valid: {', '.join(KINDS)}")
        if self.k < 3 or self.k % 2 == 0:
            raise ContractError("median kernel must be odd and >= 3")
        if not 1 <= self.bits <= 8:
            raise ContractError("bit depth must lie in [1, 8]")
        if self.tau <= 0:
            raise ContractError("tau must be > 0")
        lo, hi = self.resize_range
        if not 1 <= lo <= hi <= M.INPUT_SIZE[0]:
            raise ContractError("resize range must lie within the image size")
        if self.inner_attack not in INNER_ATTACKS:
            raise ContractError(f"unknown inner attack {self.inner_attack!r}")

    @property
    def is_input(self):
        return self.kind in INPUT_KINDS


# ---------------------------------------------------------------------------
# input processing


def _per_image(fn, x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        return fn(arr)
    return np.stack([fn(a) for a in arr])


def median_blur(x, k=3):
    """Per-channel k x k median under edge-replication padding."""
    if k % 2 == 0 or k < 1:
        raise ContractError("median kernel must be odd")
    arr = np.asarray(x, dtype=np.float64)
    if k > min(arr.shape[-3], arr.shape[-2]):
        raise ContractError("median kernel larger than the image")
    p = k // 2
    widths = [(0, 0)] * (arr.ndim - 3) + [(p, p), (p, p), (0, 0)]
    padded = np.pad(arr, widths, mode="edge")
    win = sliding_window_view(padded, (k, k), axis=(-3, -2))
    return np.median(win.reshape(win.shape[:-2] + (k * k,)), axis=-1)


def bit_depth_reduce(x, bits):
    """Quantise every channel to ``2**bits`` evenly spaced levels."""
    if not 1 <= bits <= 8:
        raise ContractError("bits must lie in [1, 8]")
    levels = 2 ** bits - 1
    return np.round(np.asarray(x, dtype=np.float64) * levels) / levels


def resize_nearest(img, size):
    h, w = img.shape[:2]
    ys = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return img[ys][:, xs]


def randomize_with(img, size, oy, ox, noise):
    """Deterministic core of :func:`randomize` for explicit draws."""
    h, w, c = img.shape
    out = np.zeros_like(img)
    out[oy:oy + size, ox:ox + size] = resize_nearest(img, size)
    return np.clip(out + noise, 0.0, 1.0)


def randomize(x, seed=0, resize_range=(54, 64), noise=1 / 255):
    """Random nearest-neighbour shrink, random zero padding back to full size, uniform noise."""
    rng = np.random.default_rng(seed)

    def one(img):
        size = int(rng.integers(resize_range[0], resize_range[1] + 1))
        oy = int(rng.integers(0, img.shape[0] - size + 1))
        ox = int(rng.integers(0, img.shape[1] - size + 1))
        return randomize_with(img, size, oy, ox, rng.uniform(-noise, noise, img.shape))

    return _per_image(one, x)


def apply_input_defense(config, x, denoiser=None, seed=0):
    """Transform images with an input-processing defense (identity for training defenses)."""
    kind = config.kind
    if kind == "MedianBlur":
        return median_blur(x, config.k)
    if kind == "BitDepth":
        return bit_depth_reduce(x, config.bits)
    if kind == "Randomize":
        return randomize(x, seed, config.resize_range, config.noise)
    if kind == "DiffPIR":
        return diffpir_restore(x, default_schedule(), denoiser, seed)
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# adversarial training


def _unpack(model, pairs):
    ys = [p[0] for p in pairs]
    return np.asarray(ys, dtype=np.float64) if model.kind == M.REGRESSOR else ys


def _pairs(model, data):
    ys = M.task_targets(model, data)
    boxes = data.boxes()
    return [(ys[i], boxes[i]) for i in range(len(data))]


def _pair_loss(model, x, pairs):
    return M.task_loss(model, x, _unpack(model, pairs))


def _pair_augment(model):
    base = M.default_augment(model)
    if base is None:
        return None

    def augment(x, pairs, rng):
        x, ys = base(x, [p[0] for p in pairs], rng)
        return x, [(y, y) for y in ys]

    return augment


def objective_for(model, targets):
    if model.kind == M.DETECTOR:
        return A.DetectorObjective(model, targets)
    return A.RegressorObjective(model, targets)


def box_masks(boxes, n=None):
    shape = M.INPUT_SIZE[:2]
    return np.stack([A.box_mask(b, shape) if b is not None else np.zeros(shape, dtype=bool) for b in boxes])


def craft(model, attack, x, targets, boxes, budget, seed):
    """Adversarial copies of ``x`` against ``model`` (ground-truth targets)."""
    x64 = np.asarray(x, dtype=np.float64)
    if attack == "gaussian":
        res = A.gaussian_noise(x64, budget.epsilon, seed=seed)
    else:
        obj = objective_for(model, targets)
        if attack == "fgsm":
            # same step as attacks.fgsm without the bookkeeping forwards
            _, g = obj.loss_grad(x64)
            return np.clip(x64 + budget.epsilon * np.sign(g), 0.0, 1.0)
        elif attack == "autopgd":
            res = A.auto_pgd(obj, x64, budget=budget)
        elif attack == "patch":
            res = A.auto_pgd(obj, x64, budget=budget, mask=box_masks(boxes))
        else:
            raise ContractError(f"unknown inner attack {attack!r}")
    return np.stack([r.x_adv for r in res])


def _inner(attack, budget):
    def perturb(model, x, pairs, rng):
        seed = int(rng.integers(2 ** 31))
        adv = craft(model, attack, x, _unpack(model, pairs), [p[1] for p in pairs], budget, seed)
        return adv.astype(np.float32)

    return perturb


def adversarial_train(model, data, inner, epochs, lr, seed, attack="fgsm", batch_size=32):
    """Min-max training: each batch is replaced by its inner-attack version.

    ``attack="mixed"`` instead attacks the whole training set once with each
    of fgsm, autopgd, gaussian and patch, keeps a 25% mixed subset and trains
    on clean plus mixed examples.  Returns ``(model, report)``.
    """
    if len(data) == 0:
        raise ContractError("adversarial_train needs a non-empty dataset")
    if attack not in INNER_ATTACKS:
        raise ContractError(f"unknown inner attack {attack!r}; valid: {', '.join(INNER_ATTACKS)}")
    trained = model.copy()
    if attack == "mixed":
        sets = [attacked_dataset(model, data, name, inner, seed) for name in INNER_ATTACKS[:4]]
        mixed, _ = build_mixed_set(sets, 0.25, seed)
        union = replace(data, entries=list(data.entries) + list(mixed.entries), paths=[])
        report = M.train(trained, union, epochs, lr, seed, batch_size)
        return trained, report
    pairs = _pairs(trained, data)
    report = M.fit(trained, data.images(), pairs, epochs, lr, seed, batch_size, perturb=_inner(attack, inner),
                   loss_fn=_pair_loss, augment=_pair_augment(trained))
    if epochs > 0:
        report.initial_loss = report.losses[0]
    return trained, report


def attacked_dataset(model, data, attack, budget, seed, chunk=64):
    """Copy of ``data`` whose images are attacked with ground-truth targets."""
    targets = M.task_targets(model, data)
    boxes = data.boxes()
    images = data.images()
    out = []
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        idx = range(*sl.indices(len(data)))
        tgt = targets[sl] if isinstance(targets, np.ndarray) else targets[sl]
        out.append(craft(model, attack, images[sl], tgt, [boxes[i] for i in idx], budget, seed + start))
    adv = np.concatenate(out)
    entries = [replace(e, image=adv[i].astype(np.float32)) for i, e in enumerate(data.entries)]
    return replace(data, entries=entries, paths=[f"{attack}:{i}" for i in range(len(data))])


def build_mixed_set(per_attack_sets, fraction=0.25, seed=0):
    """Draw ``round(fraction * n)`` examples of every attacked set into train and
    a disjoint draw of the same size into test.

    One permutation of scene indices is shared by all attacks, so no
    underlying scene appears in both splits.
    """
    if fraction * 2 > 1:
        raise ContractError("fraction must be at most 0.5 so train and test can be disjoint")
    if not per_attack_sets:
        raise ContractError("no attacked sets given")
    sizes = {len(s) for s in per_attack_sets}
    if len(sizes) != 1 or 0 in sizes:
        raise ContractError("attacked sets must be non-empty and equally sized")
    n = sizes.pop()
    k = int(np.floor(fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx, test_idx = perm[:k], perm[k:2 * k]

    def gather(idx):
        entries, paths = [], []
        for a, s in enumerate(per_attack_sets):
            ents = s.entries if hasattr(s, "entries") else list(s)
            src = s.paths if getattr(s, "paths", None) else [f"set{a}:{i}" for i in range(n)]
            entries.extend(ents[i] for i in idx)
            paths.extend(src[i] for i in idx)
        kind = getattr(per_attack_sets[0], "kind", "sign")
        from .scenegen import DatasetManifest
        return DatasetManifest(kind, entries, "mixed", seed, paths)

    return gather(train_idx), gather(test_idx)


# ---------------------------------------------------------------------------
# contrastive training


def infonce_loss(z, tau):
    """InfoNCE over 2N embeddings; rows i and i + N are the two views of one instance.

    Each anchor's denominator holds its positive and every other in-batch
    embedding except itself.
    """
    if tau <= 0:
        raise ContractError("tau must be > 0")
    if z.ndim != 2 or z.shape[0] < 4 or z.shape[0] % 2:
        raise ContractError("infonce_loss needs 2N embeddings with N >= 2")
    n2 = z.shape[0]
    n = n2 // 2
    zn = T.l2_normalize(z, axis=1)
    sim = T.mul(T.matmul(zn, T.transpose(zn)), 1.0 / tau)
    self_mask = np.where(np.eye(n2, dtype=bool), -1e9, 0.0).astype(sim.dtype)
    logp = T.log_softmax(T.add(sim, Tensor(self_mask, dtype=sim.dtype)))
    pos = (np.arange(n2) + n) % n2
    picked = T.getitem(logp, (np.arange(n2), pos))
    return T.mul(T.mean(picked), -1.0)


class ProjectionHead:
    """dense -> batch norm -> relu -> dropout -> dense, mapping trunk features to 32-d."""

    def __init__(self, in_dim=M.FEATURES, hidden=64, out_dim=32, dropout=0.1, seed=0):
        rng = np.random.default_rng(seed)
        self.params = {
            "w1": Tensor(rng.normal(0, np.sqrt(2.0 / in_dim), (in_dim, hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.normal(0, np.sqrt(1.0 / hidden), (hidden, out_dim)), requires_grad=True),
            "b2": Tensor(np.zeros(out_dim), requires_grad=True),
        }
        self.dropout = dropout

    def __call__(self, feats, rng=None):
        h = T.relu(T.batch_norm(T.dense(feats, self.params["w1"], self.params["b1"])))
        if rng is not None and self.dropout > 0:
            keep = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
            h = T.mul(h, Tensor(keep.astype(h.dtype)))
        return T.dense(h, self.params["w2"], self.params["b2"])


def augment_view(images, rng):
    """Random crop-resize, brightness jitter and small Gaussian noise."""
    out = np.empty_like(images, dtype=np.float64)
    size = images.shape[1]
    for k, img in enumerate(images):
        side = int(rng.integers(int(0.7 * size), size + 1))
        oy, ox = rng.integers(0, size - side + 1, 2)
        crop = A.resize_bilinear(np.asarray(img[oy:oy + side, ox:ox + side], dtype=np.float64), size, size)
        out[k] = crop + rng.uniform(-0.1, 0.1) + rng.normal(0, 0.02, crop.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class ContrastiveReport:
    contrastive_losses: list = field(default_factory=list)
    finetune: M.TrainReport = field(default_factory=M.TrainReport)
    head: ProjectionHead | None = None


def trunk_params(model):
    return [model.params[f"{name}.{p}"] for layer, name, _, _ in model.arch if layer == "conv" for p in ("w", "b")]


def embed(model, head, images, rng=None):
    return head(M.features(model, Tensor(np.asarray(images, dtype=np.float32))), rng)


def contrastive_train(model, data, tau=0.5, epochs=5, lr=1e-3, seed=0, batch_size=32, finetune_epochs=None):
    """Contrastive pre-training of the trunk through a projection head, then
    supervised fine-tuning on the task labels.  The head is discarded for
    inference (kept on the report for inspection)."""
    if len(data) == 0:
        raise ContractError("contrastive_train needs a non-empty dataset")
    trained = model.copy()
    head = ProjectionHead(seed=seed)
    report = ContrastiveReport(head=head)
    if epochs <= 0:
        return trained, report
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    images = data.images()
    opt = T.Adam(trunk_params(trained) + list(head.params.values()), lr=lr)
    n = len(images)
    for _ in range(epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if len(idx) < 2:
                continue
            views = np.concatenate([augment_view(images[idx], rng), augment_view(images[idx], rng)])
            z = embed(trained, head, views, rng)
            loss = infonce_loss(z, tau)
            T.backward(loss)
            opt.step()
            trained.zero_grad()
            total += loss.item() * len(idx)
            count += len(idx)
        report.contrastive_losses.append(total / max(count, 1))
    ft = epochs if finetune_epochs is None else finetune_epochs
    report.finetune = M.train(trained, data, ft, lr, seed, batch_size)
    return trained, report


def positive_pair_gap(model, head, images, seed=0):
    """Mean cosine similarity of positive view pairs minus that of random pairs."""
    rng = np.random.default_rng(seed)
    a = embed(model, head, augment_view(images, rng)).data.astype(np.float64)
    b = embed(model, head, augment_view(images, rng)).data.astype(np.float64)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    pos = np.sum(a * b, axis=1).mean()
    shift = np.roll(np.arange(len(a)), 1)
    neg = np.sum(a * b[shift], axis=1).mean()
    return float(pos - neg)


# ---------------------------------------------------------------------------
# diffusion-style restoration


@dataclass
class DiffusionSchedule:
    alpha_bar: list
    rho: list
    zeta: float = 0.3

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 1:
            raise ContractError("schedule needs at least one step")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise ContractError("alpha_bar must lie in (0, 1] and strictly decrease")
        if ab[0] < 0.99:
            raise ContractError("alpha_bar must start near 1")
        if rho.shape != ab.shape or np.any(rho <= 0):
            raise ContractError("rho must be positive, one per step")
        if not 0 <= self.zeta <= 1:
            raise ContractError("zeta must lie in [0, 1]")

    @property
    def steps(self):
        return len(self.alpha_bar)


def default_schedule(steps=10, start=0.999, end=0.5, zeta=0.3, strength=0.005):
    """Linear alpha_bar with ``rho_t = strength * alpha_bar_t / (1 - alpha_bar_t)``.

    ``rho`` grows as the noise level falls, so early steps stay close to the
    observation and the final steps trust the denoiser.
    """
    ab = np.linspace(start, end, steps)
    return DiffusionSchedule(list(ab), list(strength * ab / (1.0 - ab)), zeta)


def proximal_step(y, x0, rho):
    """argmin_x ||y - x||^2 + rho ||x - x0||^2 for identity degradation."""
    y = np.asarray(y, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if np.isinf(rho):
        return x0.copy()
    return (y + rho * x0) / (1.0 + rho)


def denoiser_forward(bundle, x):
    """Residual convolutional correction of a (median-blurred) NHWC tensor."""
    h = x
    names = [name for _, name, _, _ in bundle.arch]
    for i, name in enumerate(names):
        h = T.add_bias(T.conv2d(T.pad2d(h, 1), bundle.params[f"{name}.w"]), bundle.params[f"{name}.b"])
        if i < len(names) - 1:
            h = T.relu(h)
    return T.add(x, h)


class Denoiser:
    """median_blur(3) followed by a small trained residual CNN."""

    def __init__(self, bundle=None, k=3):
        self.bundle = bundle
        self.k = k

    def __call__(self, x):
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 3
        m = median_blur(arr[None] if single else arr, self.k)
        if self.bundle is not None:
            m = denoiser_forward(self.bundle, Tensor(m.astype(np.float32))).data.astype(np.float64)
        return m[0] if single else m


def corrupt(x, rng, sigma_max=0.15, eps_max=12 / 255):
    """Training corruption: Gaussian, signed (+-eps) or no noise, chosen per image."""
    out = np.array(x, dtype=np.float64)
    for k in range(len(out)):
        mode = rng.integers(0, 3)
        if mode == 0:
            out[k] += rng.normal(0, rng.uniform(0, sigma_max), out[k].shape)
        elif mode == 1:
            out[k] += rng.uniform(0, eps_max) * rng.choice([-1.0, 1.0], out[k].shape)
    return np.clip(out, 0.0, 1.0)


def train_denoiser(images, epochs=10, lr=2e-3, seed=0, batch_size=16, k=3):
    """Fit the residual CNN to map median-blurred corrupted scenes back to clean ones."""
    bundle = M.init_model(M.DENOISER, seed)
    clean = np.asarray(images, dtype=np.float32)

    def perturb(model, x, y, rng):
        return median_blur(corrupt(x, rng), k).astype(np.float32)

    def loss_fn(model, x, y):
        out = denoiser_forward(model, Tensor(x))
        diff = T.square(T.sub(out, Tensor(np.asarray(y, dtype=np.float32))))
        return T.mul(T.tsum(T.reshape(diff, (len(y), -1)), axis=1), 1.0 / float(np.prod(M.INPUT_SIZE)))

    report = M.fit(bundle, clean, clean, epochs, lr, seed, batch_size, perturb=perturb, loss_fn=loss_fn)
    return Denoiser(bundle, k), report


def diffpir_restore(y, schedule=None, denoiser=None, seed=0):
    """Plug-and-play restoration alternating denoising, a proximal data step
    and partial re-noising along a diffusion schedule (identity degradation)."""
    schedule = schedule or default_schedule()
    if not isinstance(schedule, DiffusionSchedule):
        raise ContractError("schedule must be a DiffusionSchedule")
    denoiser = denoiser or Denoiser()
    obs = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
    rng = np.random.default_rng(seed)
    ab = np.asarray(schedule.alpha_bar, dtype=np.float64)
    zeta = schedule.zeta
    last = schedule.steps - 1
    x = np.sqrt(ab[last]) * obs + np.sqrt(1.0 - ab[last]) * rng.normal(size=obs.shape)
    out = obs
    for t in range(last, -1, -1):
        x0 = denoiser(x / np.sqrt(ab[t]))
        out = proximal_step(obs, x0, schedule.rho[t])
        if t == 0:
            break
        eps_hat = (x - np.sqrt(ab[t]) * x0) / np.sqrt(1.0 - ab[t])
        noise = rng.normal(size=obs.shape)
        mix = np.sqrt(1.0 - zeta) * eps_hat + np.sqrt(zeta) * noise
        x = np.sqrt(ab[t - 1]) * out + np.sqrt(1.0 - ab[t - 1]) * mix
    return np.clip(out, 0.0, 1.0)
