"""Perturbation generators against the detector and the distance regressor.

All attacks work on a batch internally; passing one image returns one
:class:`AttackResult`, passing a batch returns a list.  Perturbation
bookkeeping runs in float64 so norm bounds hold exactly: every result
satisfies ``x_adv == clip(x + delta, 0, 1)`` elementwise.

What an attack maximises is an :class:`Objective`.  For the detector it is
the training loss against the ground-truth boxes; for the regressor it is the
squared deviation from the clean prediction.  That deviation has a zero
gradient at the clean input, so its ascent direction there is taken from the
one-sided limit ``+grad f`` (push the predicted distance up).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from . import models as M
from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass
class Budget:
    norm: str = "Linf"
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    max_iters: int = 10
    max_queries: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("Linf", "L2"):
            raise ContractError(f"unknown norm {self.norm!r}")
        if not (np.isfinite(self.epsilon) and np.isfinite(self.alpha)) or self.epsilon < 0 or self.alpha <= 0:
            raise ContractError("epsilon must be finite and >= 0, alpha finite and > 0")
        if self.max_iters < 1 or self.max_queries < 1:
            raise ContractError("max_iters and max_queries must be >= 1")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta: np.ndarray
    loss_trace: list = field(default_factory=list)
    queries_used: int = 0
    success: bool = False


@dataclass
class PatchState:
    delta: np.ndarray
    bbox: tuple
    frame_index: int = 0


# ---------------------------------------------------------------------------
# objectives


class Objective:
    """Per-sample quantity an attack maximises, with its input gradient."""

    sample_ndim = 3

    def loss(self, x):
        return self.loss_grad(x, need_grad=False)[0]

    def loss_grad(self, x, need_grad=True):
        raise NotImplementedError

    def query(self, x):
        """Black-box score to maximise (defaults to the loss)."""
        return self.loss(x)

    def success(self, x_adv, x):
        return self.loss(x_adv) > self.loss(x)


class FunctionObjective(Objective):
    """Wraps ``fn(Tensor of shape (N, *sample)) -> Tensor (N,)``."""

    def __init__(self, fn, sample_ndim=None):
        self.fn = fn
        self.sample_ndim = sample_ndim

    def loss_grad(self, x, need_grad=True):
        xt = Tensor(x, requires_grad=need_grad, dtype=np.float64)
        out = self.fn(xt)
        if not need_grad:
            return out.data.astype(np.float64), None
        T.backward(T.tsum(out), inputs=[xt])
        return out.data.astype(np.float64), xt.grad


class DetectorObjective(Objective):
    """Detector loss against ground truth; black-box score is ``-p(true label)``."""

    def __init__(self, model, boxes):
        self.model = model
        self.boxes = list(boxes)

    def sub(self, idx):
        return DetectorObjective(self.model, [self.boxes[i] for i in idx])

    def loss_grad(self, x, need_grad=True):
        xt = Tensor(x.astype(np.float32), requires_grad=need_grad)
        loss = M.detector_loss(self.model, xt, self.boxes)
        if not need_grad:
            return loss.data.astype(np.float64), None
        T.backward(T.tsum(loss), inputs=[xt])
        return loss.data.astype(np.float64), xt.grad.astype(np.float64)

    def true_prob(self, x):
        p = M.max_objectness(self.model, x.astype(np.float32))
        has = np.array([b is not None for b in self.boxes])
        return np.where(has, p, 1.0 - p)

    def query(self, x):
        return -self.true_prob(x)

    def success(self, x_adv, x):
        return self.true_prob(x_adv) < 0.5


class RegressorObjective(Objective):
    """Squared deviation of the predicted distance from the clean prediction."""

    def __init__(self, model, clean_pred, threshold=1.0):
        self.model = model
        self.clean = np.asarray(clean_pred, dtype=np.float64)
        self.threshold = threshold

    def sub(self, idx):
        return RegressorObjective(self.model, self.clean[list(idx)], self.threshold)

    def predict(self, x):
        return M.predict_distance(self.model, x.astype(np.float32))

    def loss_grad(self, x, need_grad=True):
        xt = Tensor(x.astype(np.float32), requires_grad=need_grad)
        pred = M.regressor_forward(self.model, xt)
        dev = pred.data.astype(np.float64) - self.clean
        loss = dev * dev
        if not need_grad:
            return loss, None
        T.backward(T.tsum(pred), inputs=[xt])
        g = xt.grad.astype(np.float64)
        scale = np.where(dev == 0, 1.0, 2.0 * dev).reshape((-1,) + (1,) * (g.ndim - 1))
        return loss, g * scale

    def query(self, x):
        return np.abs(self.predict(x) - self.clean)

    def success(self, x_adv, x):
        return np.abs(self.predict(x_adv) - self.clean) > self.threshold


def make_objective(model, x, target=None):
    """Objective for a model bundle, an :class:`Objective`, or a loss callable."""
    if isinstance(model, Objective):
        return model
    if isinstance(model, M.ModelBundle):
        batched = np.asarray(x).ndim == 4
        if model.kind == M.DETECTOR:
            boxes = target if batched else [target]
            return DetectorObjective(model, boxes)
        if target is None:
            target = M.predict_distance(model, np.asarray(x, np.float32).reshape((-1,) + M.INPUT_SIZE))
        return RegressorObjective(model, np.atleast_1d(target))
    if callable(model):
        return FunctionObjective(model, np.asarray(x).ndim)
    raise ContractError(f"cannot attack {type(model).__name__}")


def _batch(x, objective):
    arr = np.array(x, dtype=np.float64)
    nd = objective.sample_ndim if objective.sample_ndim is not None else arr.ndim
    single = arr.ndim == nd
    return (arr[None] if single else arr), single


def _mask(mask, shape):
    """Broadcast a mask to a batch ``shape``: full, per-sample, per-image HxW, or one shared HxW."""
    if mask is None:
        return np.ones(shape)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape == tuple(shape):
        pass
    elif m.shape == tuple(shape[1:]):
        m = m[None]
    elif len(shape) == 4 and m.shape == tuple(shape[:3]):
        m = m[..., None]
    elif len(shape) == 4 and m.shape == tuple(shape[1:3]):
        m = m[None, ..., None]
    else:
        raise ContractError(f"mask of shape {m.shape} does not fit inputs of shape {tuple(shape)}")
    return np.broadcast_to(m, shape).astype(np.float64)


def _spread(v, ndim):
    return np.asarray(v).reshape((-1,) + (1,) * (ndim - 1))


def _finish(x, delta, traces, queries, success, single):
    x_adv = np.clip(x + delta, 0.0, 1.0)
    out = [AttackResult(x_adv[k], delta[k], list(traces[k]), int(queries[k]), bool(success[k])) for k in range(len(x))]
    return out[0] if single else out


def _check_linf(budget):
    if budget.norm != "Linf":
        raise ContractError("this attack needs an Linf budget")


# ---------------------------------------------------------------------------
# Gaussian noise


def gaussian_noise(x, sigma, seed=0, mask=None):
    """Add i.i.d. N(0, sigma^2) noise (optionally only where ``mask`` is set)."""
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    arr = np.array(x, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    rng = np.random.default_rng(seed)
    delta = rng.normal(0.0, 1.0, arr.shape) * sigma * _mask(mask, arr.shape)
    changed = np.any(delta.reshape(len(arr), -1) != 0, axis=1)
    return _finish(arr, delta, [[] for _ in arr], np.zeros(len(arr)), changed, single)


# ---------------------------------------------------------------------------
# FGSM and Auto-PGD


def fgsm(model, x, target=None, budget=None, mask=None):
    """One signed-gradient step of size epsilon; sign(0) = 0."""
    budget = budget or Budget()
    _check_linf(budget)
    obj = make_objective(model, x, target)
    xb, single = _batch(x, obj)
    loss0, g = obj.loss_grad(xb)
    delta = budget.epsilon * np.sign(g) * _mask(mask, xb.shape)
    x_adv = np.clip(xb + delta, 0.0, 1.0)
    loss1 = obj.loss(x_adv)
    success = obj.success(x_adv, xb)
    traces = [[float(a), float(b)] for a, b in zip(loss0, loss1)]
    return _finish(xb, delta, traces, np.ones(len(xb)), success, single)


def auto_pgd(model, x, target=None, budget=None, mask=None):
    """Projected signed-gradient ascent with step halving on stalled progress.

    The step size of a sample is halved at a checkpoint (every
    ``max(5, iters // 10)`` iterations) when its best loss did not improve
    since the previous checkpoint.  Returns the best iterate; the loss trace
    is the best-so-far loss after each iteration.
    """
    budget = budget or Budget()
    _check_linf(budget)
    obj = make_objective(model, x, target)
    xb, single = _batch(x, obj)
    n, nd = len(xb), xb.ndim
    eps = budget.epsilon
    m = _mask(mask, xb.shape)
    lo = np.maximum(-eps, -xb)
    hi = np.minimum(eps, 1.0 - xb)
    alpha = np.full(n, float(budget.alpha))
    delta = np.zeros_like(xb)
    best = np.full(n, -np.inf)
    best_delta = np.zeros_like(xb)
    ckpt_best = np.full(n, -np.inf)
    window = max(5, budget.max_iters // 10)
    traces = [[] for _ in range(n)]
    _, g = obj.loss_grad(xb)
    for t in range(1, budget.max_iters + 1):
        delta = np.clip(delta + _spread(alpha, nd) * np.sign(g) * m, lo, hi)
        x_t = np.clip(xb + delta, 0.0, 1.0)
        if t < budget.max_iters:
            loss, g = obj.loss_grad(x_t)
        else:
            loss = obj.loss(x_t)
        improved = loss > best
        best = np.where(improved, loss, best)
        best_delta[improved] = delta[improved]
        for k in range(n):
            traces[k].append(float(best[k]))
        if t % window == 0:
            stalled = best <= ckpt_best
            alpha[stalled] *= 0.5
            ckpt_best = best.copy()
    x_adv = np.clip(xb + best_delta, 0.0, 1.0)
    return _finish(xb, best_delta, traces, np.full(n, budget.max_iters), obj.success(x_adv, xb), single)


# ---------------------------------------------------------------------------
# SimBA


@lru_cache(maxsize=8)
def dct_matrix(n):
    """Orthonormal DCT-II matrix; row k is the k-th cosine basis vector."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def dct_basis_vector(index, shape):
    """Orthonormal 2-D DCT basis image for ``(row_freq, col_freq, channel)``."""
    i, j, c = index
    h, w, ch = shape
    ri = dct_matrix(h)[i]
    cj = dct_matrix(w)[j]
    out = np.zeros(shape)
    out[:, :, c] = np.outer(ri, cj)
    return out


def _dct_order(rng, shape, low=16):
    h, w, ch = shape
    coords = [(i, j, c) for i in range(h) for j in range(w) for c in range(ch)]
    low_set = [k for k in coords if k[0] < low and k[1] < low]
    high_set = [k for k in coords if not (k[0] < low and k[1] < low)]
    return [low_set[i] for i in rng.permutation(len(low_set))] + [high_set[i] for i in rng.permutation(len(high_set))]


def simba(model, x, target=None, budget=None, basis="pixel", mask=None):
    """Simple black-box attack over a pixel or DCT orthonormal basis.

    Each step spends two queries on ``delta +- eps * q`` for a fresh basis
    vector ``q`` and keeps the better one only if it improves the black-box
    score.  One extra query measures the starting score.
    """
    budget = budget or Budget()
    if basis not in ("pixel", "dct"):
        raise ContractError(f"unknown SimBA basis {basis!r}")
    if basis == "dct" and mask is not None:
        raise ContractError("masked SimBA supports the pixel basis only")
    obj = make_objective(model, x, target)
    xb, single = _batch(x, obj)
    n = len(xb)
    sample_shape = xb.shape[1:]
    eps = budget.epsilon
    m = _mask(mask, xb.shape)
    rng = np.random.default_rng(budget.seed)
    if basis == "pixel":
        orders = [rng.permutation(np.flatnonzero(m[k].reshape(-1) > 0)) for k in range(n)]
    else:
        shared = _dct_order(rng, sample_shape)
        orders = [shared] * n
    steps = min((budget.max_queries - 1) // 2, min(len(o) for o in orders))
    delta = np.zeros_like(xb)
    score = obj.query(xb)
    paired = obj.sub(list(range(n)) * 2) if hasattr(obj, "sub") else obj
    queries = np.ones(n, dtype=int)
    accepted = np.zeros(n, dtype=int)
    traces = [[float(s)] for s in score]
    flat = xb.reshape(n, -1)
    for step in range(steps):
        if basis == "pixel":
            q = np.zeros((n, flat.shape[1]))
            q[np.arange(n), [o[step] for o in orders]] = 1.0
            q = q.reshape(xb.shape)
        else:
            q = np.broadcast_to(dct_basis_vector(orders[0][step], sample_shape), xb.shape)
        cand_plus = delta + eps * q
        cand_minus = delta - eps * q
        both = np.clip(np.concatenate([xb + cand_plus, xb + cand_minus]), 0.0, 1.0)
        s = paired.query(both)
        queries += 2
        s_plus, s_minus = s[:n], s[n:]
        use_plus = (s_plus > score) & (s_plus >= s_minus)
        use_minus = (s_minus > score) & ~use_plus
        delta = np.where(_spread(use_plus, xb.ndim), cand_plus, delta)
        delta = np.where(_spread(use_minus, xb.ndim), cand_minus, delta)
        score = np.where(use_plus, s_plus, np.where(use_minus, s_minus, score))
        accepted += use_plus | use_minus
        for k in range(n):
            traces[k].append(float(score[k]))
    results = _finish(xb, delta, traces, queries, accepted > 0, single)
    for r, a in zip([results] if single else results, accepted):
        r.accepted_steps = int(a)
    return results


# ---------------------------------------------------------------------------
# transforms shared by RP2


@dataclass
class TransformSampler:
    rotation_deg: float = 15.0
    scale: tuple = (0.8, 1.2)
    translation_px: float = 4.0
    brightness: float = 0.1
    seed: int = 0

    def sample(self, rng):
        return {
            "angle": float(rng.uniform(-self.rotation_deg, self.rotation_deg)),
            "scale": float(rng.uniform(*self.scale)),
            "tx": float(rng.uniform(-self.translation_px, self.translation_px)),
            "ty": float(rng.uniform(-self.translation_px, self.translation_px)),
            "brightness": float(rng.uniform(-self.brightness, self.brightness)),
        }


def warp_tables(transforms, centers, shape, clamp):
    """Bilinear gather tables for similarity transforms about per-transform centres.

    ``shape`` is (H, W).  Returns ``(index, weight)`` of shape (B, H, W, 4)
    holding flat pixel indices into one HxW image.  With ``clamp`` the
    source is edge-extended, otherwise out-of-image taps get zero weight.
    """
    h, w = shape[:2]
    ang = np.deg2rad(np.array([t["angle"] for t in transforms]))[:, None, None]
    sc = np.array([t["scale"] for t in transforms])[:, None, None]
    tx = np.array([t["tx"] for t in transforms])[:, None, None]
    ty = np.array([t["ty"] for t in transforms])[:, None, None]
    cen = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    cx, cy = cen[:, 0, None, None], cen[:, 1, None, None]
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    px = xs[None] - cx - tx
    py = ys[None] - cy - ty
    ca, sa = np.cos(ang), np.sin(ang)
    sx = (ca * px + sa * py) / sc + cx - 0.5
    sy = (-sa * px + ca * py) / sc + cy - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    idx, wts = [], []
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy, xx = y0 + dy, x0 + dx
        if clamp:
            yy, xx = np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)
        else:
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yy, xx = np.where(valid, yy, 0), np.where(valid, xx, 0)
            wt = wt * valid
        idx.append(yy * w + xx)
        wts.append(wt)
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


def warp_table(transform, center, shape, clamp):
    """Single-transform form of :func:`warp_tables`, shape (H, W, 4)."""
    index, weight = warp_tables([transform], [center], shape, clamp)
    return index[0], weight[0]


def apply_warp(x, table):
    """Resample an HxWxC image (or a batch matching a batched table)."""
    index, weight = table
    x = np.asarray(x)
    if index.ndim == 4:
        h, w = x.shape[-3:-1]
        rows = x.reshape(-1, x.shape[-1])
        offset = (np.arange(len(index)) * h * w)[:, None, None, None] if x.ndim == 4 else 0
        return np.einsum("...kc,...k->...c", rows[index + offset], weight)
    rows = x.reshape(-1, x.shape[-1])
    return np.einsum("...kc,...k->...c", rows[index], weight)


# ---------------------------------------------------------------------------
# RP2


def default_palette():
    """32 printable colours: a 4 x 4 x 2 lattice of the RGB cube."""
    r = np.linspace(0, 1, 4)
    b = np.array([0.0, 1.0])
    return np.array([(ri, gi, bi) for ri in r for gi in r for bi in b])


def non_printability_score(pixels, palette):
    """Sum over pixels of the distance to the nearest palette colour."""
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    d = np.linalg.norm(p[:, None, :] - np.asarray(palette)[None], axis=-1)
    return float(d.min(axis=1).sum())


def _nps_term(pixels, palette, sel):
    """Differentiable NPS over the selected pixels of an (N, H, W, 3) tensor."""
    flat = T.reshape(pixels, (-1, 3))
    rows = np.flatnonzero(sel.reshape(-1))
    chosen = T.getitem(flat, rows)
    d = np.linalg.norm(chosen.data[:, None, :].astype(np.float64) - palette[None], axis=-1)
    nearest = palette[np.argmin(d, axis=1)].astype(chosen.dtype)
    diff = T.sub(chosen, nearest)
    dist = T.sqrt(T.add(T.tsum(T.square(diff), axis=1), 1e-12))
    # sum per image
    owner = rows // (sel.shape[1] * sel.shape[2])
    onehot = np.zeros((len(rows), sel.shape[0]), dtype=chosen.dtype)
    onehot[np.arange(len(rows)), owner] = 1.0
    return T.matmul(T.reshape(dist, (1, -1)), Tensor(onehot, dtype=chosen.dtype))


def _box_center(box, mask):
    if box is not None:
        return box[0], box[1]
    ys, xs = np.nonzero(mask)
    return xs.mean() + 0.5, ys.mean() + 0.5


def rp2(model, x, mask, target_label=0, sampler=None, lam=0.002, iters=200, lr=0.01,
        palette=None, samples=8, nps_weight=1e-3, epsilon=None, boxes=None, seed=0):
    """Masked, printable patch optimised over random viewpoint transforms.

    Minimises ``lam * ||M delta||_2 + nps_weight * NPS + mean_i J(f(T_i x + T_i(M delta)), y*)``
    with Adam, ``samples`` fresh transforms per iteration.  ``target_label`` 0
    asks the detector to see no sign, 1 to see one in every cell.  Returns a
    :class:`PatchState` and an :class:`AttackResult` per image.
    """
    if model.kind != M.DETECTOR:
        raise ContractError("rp2 attacks the sign detector")
    xb = np.array(x, dtype=np.float64)
    single = xb.ndim == 3
    if single:
        xb = xb[None]
    masks = np.asarray(mask, dtype=bool)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, xb.shape[:3])
    if masks.shape != xb.shape[:3]:
        raise ContractError("one HxW mask per image required")
    if not masks.reshape(len(xb), -1).any(axis=1).all():
        raise ContractError("rp2 needs a non-empty mask")
    boxes = boxes if boxes is not None else [None] * len(xb)
    if single and boxes and not isinstance(boxes, list):
        boxes = [boxes]
    sampler = sampler or TransformSampler(seed=seed)
    palette = default_palette() if palette is None else np.asarray(palette, dtype=np.float64)
    n, h, w, c = xb.shape
    mfull = np.broadcast_to(masks[..., None], xb.shape).astype(np.float32)
    centers = [_box_center(boxes[k], masks[k]) for k in range(n)]
    rng = np.random.default_rng(sampler.seed)
    delta = Tensor(np.zeros(xb.shape), requires_grad=True)
    opt = T.Adam([delta], lr=lr)
    x32 = xb.astype(np.float32)
    traces = [[] for _ in range(n)]
    hi = 1.0 - xb
    lo = -xb
    if epsilon is not None:
        hi = np.minimum(hi, epsilon)
        lo = np.maximum(lo, -epsilon)
    owner = np.repeat(np.arange(n), samples)
    offset = (owner * h * w)[:, None, None, None]
    for _ in range(iters):
        tfs = [sampler.sample(rng) for _ in range(n * samples)]
        # the patch is zero near the border, so one edge-clamped warp of x + patch suffices
        ti, tw = warp_tables(tfs, [centers[k] for k in owner], (h, w), clamp=True)
        bright = np.broadcast_to(np.array([t["brightness"] for t in tfs], dtype=np.float32)[:, None, None, None], (n * samples, h, w, c))
        patch = T.mul(delta, Tensor(mfull))
        painted = T.add(Tensor(x32), patch)
        warped = T.gather_rows(T.reshape(painted, (-1, c)), ti + offset, tw)
        inputs = T.clip(T.add(warped, Tensor(bright)), 0.0, 1.0)
        if target_label == 0:
            j = M.suppression_loss(model, inputs)
        else:
            raw = M.detector_logits(model, inputs)
            j = T.mul(T.tsum(T.bce_with_logits(raw[..., 0], np.ones(raw.shape[:3])), axis=(1, 2)), 1.0 / 16)
        j_img = T.mul(T.tsum(T.reshape(j, (n, samples)), axis=1), 1.0 / samples)
        norm = T.sqrt(T.add(T.tsum(T.reshape(T.square(patch), (n, -1)), axis=1), 1e-12))
        nps = T.reshape(_nps_term(painted, palette, masks), (n,))
        total = T.add(T.add(T.mul(norm, lam), T.mul(nps, nps_weight)), j_img)
        T.backward(T.tsum(total), inputs=[delta])
        opt.step()
        delta.data[:] = np.clip(delta.data, lo, hi) * mfull
        for k in range(n):
            traces[k].append(float(total.data[k]))
    d = delta.data.astype(np.float64) * mfull
    if epsilon is not None:
        d = np.clip(d, -epsilon, epsilon)
    x_adv = np.clip(xb + d, 0.0, 1.0)
    p_clean = M.max_objectness(model, x32)
    p_adv = M.max_objectness(model, x_adv.astype(np.float32))
    out = []
    for k in range(n):
        patch_state = PatchState(d[k], boxes[k] if boxes[k] is not None else _mask_bbox(masks[k]), 0)
        success = p_adv[k] < 0.5 <= p_clean[k] if target_label == 0 else p_adv[k] >= 0.5 > p_clean[k]
        out.append((patch_state, AttackResult(x_adv[k], d[k], traces[k], iters * samples, bool(success))))
    return out[0] if single else out


def _mask_bbox(mask):
    ys, xs = np.nonzero(mask)
    x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    return ((x0 + x1) / 2, (y0 + y1) / 2, float(x1 - x0), float(y1 - y0))


def transformed_objectness(model, x, delta, box, sampler, count=16, seed=0):
    """Mean max-objectness of ``x + delta`` over ``count`` sampled viewpoints."""
    rng = np.random.default_rng(seed)
    xb = np.asarray(x, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    center = (box[0], box[1])
    tfs = [sampler.sample(rng) for _ in range(count)]
    table = warp_tables(tfs, [center] * count, xb.shape, clamp=True)
    bright = np.array([t["brightness"] for t in tfs])[:, None, None, None]
    views = np.clip(apply_warp(np.clip(xb + d, 0, 1), table) + bright, 0, 1)
    return float(M.max_objectness(model, views.astype(np.float32)).mean())


# ---------------------------------------------------------------------------
# CAP runtime patch


def box_slices(box, shape=(64, 64)):
    cx, cy, w, h = box
    x0 = int(np.clip(round(cx - w / 2), 0, shape[1]))
    x1 = int(np.clip(round(cx + w / 2), 0, shape[1]))
    y0 = int(np.clip(round(cy - h / 2), 0, shape[0]))
    y1 = int(np.clip(round(cy + h / 2), 0, shape[0]))
    return slice(y0, y1), slice(x0, x1)


def box_mask(box, shape=(64, 64)):
    m = np.zeros(shape, dtype=bool)
    m[box_slices(box, shape)] = True
    return m


def resize_bilinear(patch, out_h, out_w):
    """Bilinear resize of an (h, w, c) array, pixel centres aligned."""
    h, w = patch.shape[:2]
    if (h, w) == (out_h, out_w):
        return patch.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = patch[y0][:, x0] * (1 - fx) + patch[y0][:, x1] * fx
    bottom = patch[y1][:, x0] * (1 - fx) + patch[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def prox_linf(v, t):
    """Proximal operator of ``t * ||v||_inf``: clip at the level that removes L1 mass ``t``."""
    if t <= 0:
        return v.copy()
    a = np.abs(v).reshape(-1)
    if a.sum() <= t:
        return np.zeros_like(v)
    s = np.sort(a)[::-1]
    cs = np.cumsum(s)
    k = np.arange(1, s.size + 1)
    theta = (cs - t) / k
    # ties give the same threshold either way; >= survives t below rounding level
    rho = np.flatnonzero(s >= theta)[-1]
    return np.clip(v, -theta[rho], theta[rho])


def _remap(prev_delta, prev_box, box, shape):
    """Carry the previous patch into the new box: crop, resize, translate."""
    out = np.zeros(shape)
    ps = box_slices(prev_box, shape[:2])
    ns = box_slices(box, shape[:2])
    src = prev_delta[ps]
    nh, nw = ns[0].stop - ns[0].start, ns[1].stop - ns[1].start
    if src.size and nh > 0 and nw > 0:
        out[ns] = resize_bilinear(src, nh, nw)
    return out


def cap_run(model, frames, budget=None, lam=0.0, top_fraction=0.5):
    """Runtime patch on the lead-vehicle box, inherited from frame to frame.

    Per frame: remap the previous patch onto the new box, rank box pixels by
    ``|grad f * input|`` and take a signed step of size alpha on the top
    fraction towards a larger predicted distance, shrink with the proximal map
    of ``alpha * lam * ||.||_inf``, then clip to epsilon and to valid pixels.
    """
    budget = budget or Budget()
    _check_linf(budget)
    if model.kind != M.REGRESSOR:
        raise ContractError("cap_run attacks the distance regressor")
    eps, alpha = budget.epsilon, budget.alpha
    out = []
    prev_delta, prev_box = None, None
    for t, frame in enumerate(frames):
        box = getattr(frame, "lead_box", None)
        if box is None:
            raise ContractError(f"frame {t} carries no lead bounding box")
        x = np.asarray(frame.image, dtype=np.float64)
        if prev_delta is None:
            delta = np.zeros_like(x)
        else:
            delta = _remap(prev_delta, prev_box, box, x.shape)
        inside = box_mask(box, x.shape[:2])
        lo = np.maximum(-eps, -x)
        hi = np.minimum(eps, 1.0 - x)
        delta = np.clip(delta, lo, hi) * inside[..., None]
        cur = np.clip(x + delta, 0.0, 1.0)
        xt = Tensor(cur.astype(np.float32), requires_grad=True)
        pred = M.regressor_forward(model, xt)
        T.backward(pred, inputs=[xt])
        g = xt.grad.astype(np.float64)
        attribution = np.abs(g * cur).sum(axis=2)
        vals = attribution[inside]
        if vals.size:
            cut = np.quantile(vals, 1.0 - top_fraction, method="higher") if top_fraction < 1 else -np.inf
            sel = inside & (attribution >= cut)
            delta = delta + alpha * np.sign(g) * sel[..., None]
        delta = prox_linf(delta, alpha * lam)
        delta = np.clip(delta, lo, hi) * inside[..., None]
        x_adv = np.clip(x + delta, 0.0, 1.0)
        clean_pred, adv_pred = M.predict_distance(model, np.stack([x, x_adv]).astype(np.float32))
        result = AttackResult(x_adv, delta, [float(clean_pred), float(adv_pred)], t + 1, bool(adv_pred > clean_pred))
        out.append((PatchState(delta, tuple(box), t), result))
        prev_delta, prev_box = delta, box
    return out
