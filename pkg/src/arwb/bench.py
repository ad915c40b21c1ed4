"""Attack x defense benchmark matrix over the detector and the regressor.

Input defenses transform images that were attacked against the undefended
model; training defenses swap in their own checkpoint, which is then
attacked white-box.  Regression errors are always measured against the
undefended model's clean prediction on the same frame.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import attacks as A
from . import defenses as D
from . import evalkit as E
from . import models as M
from .errors import ConfigError

ATTACKS = ("None", "Gaussian", "FGSM", "AutoPGD", "SimBA", "CAP/RP2")
DEFENSES = D.KINDS


@dataclass
class AttackSettings:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iters: int = 10
    queries: int = 200
    simba_epsilon: float = 0.2
    sigma: float = 0.1
    lam: float = 0.0
    basis: str = "pixel"
    rp2_iters: int = 50
    rp2_samples: int = 4
    seed: int = 0

    def budget(self, **over):
        kw = dict(epsilon=self.epsilon, alpha=self.alpha, max_iters=self.iters, max_queries=self.queries, seed=self.seed)
        kw.update(over)
        return A.Budget(**kw)


@dataclass
class BenchData:
    signs: object
    sequences: list = field(default_factory=list)

    @property
    def frames(self):
        return [f for seq in self.sequences for f in seq]


def _model_key(defense_kind):
    return {"AdvTrain": "adv", "Contrastive": "contrastive"}.get(defense_kind, "standard")


def required_models(defenses):
    keys = {"standard"} | {_model_key(d.kind) for d in defenses}
    out = []
    for k in sorted(keys):
        out += [f"detector.{k}", f"regressor.{k}"]
    if any(d.kind == "DiffPIR" for d in defenses):
        out.append("denoiser")
    return out


def _seed(*parts):
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------------------
# attacks on each task


def attack_signs(model, attack, data, settings, seed):
    x = data.images().astype(np.float64)
    boxes = data.boxes()
    if attack == "None":
        return x
    if attack == "Gaussian":
        res = A.gaussian_noise(x, settings.sigma, seed=seed)
    elif attack == "FGSM":
        res = A.fgsm(model, x, boxes, settings.budget())
    elif attack == "AutoPGD":
        res = A.auto_pgd(model, x, boxes, settings.budget())
    elif attack == "SimBA":
        res = A.simba(model, x, boxes, settings.budget(epsilon=settings.simba_epsilon, seed=seed), basis=settings.basis)
    elif attack == "CAP/RP2":
        out = x.copy()
        pos = [i for i, b in enumerate(boxes) if b is not None]
        if pos:
            masks = np.stack([_sign_mask(data.entries[i]) for i in pos])
            sampler = A.TransformSampler(seed=seed)
            res = A.rp2(model, x[pos], masks, 0, sampler, iters=settings.rp2_iters, samples=settings.rp2_samples,
                        epsilon=None, boxes=[boxes[i] for i in pos], seed=seed)
            for i, (_, r) in zip(pos, res):
                out[i] = r.x_adv
        return out
    else:
        raise ConfigError(f"unknown attack {attack!r}")
    return np.stack([r.x_adv for r in res])


def _sign_mask(entry):
    if entry.mask is not None:
        return np.asarray(entry.mask, dtype=bool)
    from .scenegen import octagon_mask
    cx, cy, w, _ = entry.gt_box
    return octagon_mask(cx, cy, w / 2)


def attack_frames(model, attack, sequences, clean_ref, settings, seed):
    frames = [f for seq in sequences for f in seq]
    x = np.stack([f.image for f in frames]).astype(np.float64)
    if attack == "None":
        return x
    masks = np.stack([A.box_mask(f.lead_box) for f in frames])
    if attack == "Gaussian":
        res = A.gaussian_noise(x, settings.sigma, seed=seed, mask=masks)
    elif attack == "FGSM":
        res = A.fgsm(model, x, clean_ref, settings.budget(), mask=masks)
    elif attack == "AutoPGD":
        res = A.auto_pgd(model, x, clean_ref, settings.budget(), mask=masks)
    elif attack == "SimBA":
        res = A.simba(model, x, clean_ref, settings.budget(epsilon=settings.simba_epsilon, seed=seed), mask=masks)
    elif attack == "CAP/RP2":
        # one signed step per frame, so the step spans the whole budget
        budget = settings.budget(alpha=max(settings.epsilon, 1e-12))
        res = [r for seq in sequences for _, r in A.cap_run(model, seq, budget, lam=settings.lam)]
    else:
        raise ConfigError(f"unknown attack {attack!r}")
    return np.stack([r.x_adv for r in res])


# ---------------------------------------------------------------------------
# the matrix


def _cell_id(attack, defense):
    return f"{attack}__{defense}".replace("/", "-").lower()


def run_benchmark_matrix(models, attacks, defenses, data, seed=0, settings=None, jobs=1, runs_dir=None,
                         metadata=None, strict=True):
    """Evaluate every (attack, defense) cell; returns a :class:`ReportTable`.

    ``models`` maps ``detector.standard``, ``regressor.standard`` and, when
    the corresponding defenses are requested, ``*.adv``, ``*.contrastive``
    and ``denoiser`` to loaded bundles (the denoiser as a
    :class:`defenses.Denoiser`).  With ``strict=False`` a failing cell is
    listed in ``table.failures`` instead of raising.
    """
    settings = settings or AttackSettings(seed=seed)
    for a in attacks:
        if a not in ATTACKS:
            raise ConfigError(f"unknown attack {a!r}; valid: {', '.join(ATTACKS)}")
    defenses = [d if isinstance(d, D.DefenseConfig) else D.DefenseConfig(kind=d) for d in defenses]
    missing = [k for k in required_models(defenses) if models.get(k) is None]
    if missing:
        raise ConfigError(f"missing checkpoint(s): {', '.join(missing)}")
    reg0 = models["regressor.standard"]
    signs = data.signs
    gts = signs.boxes()
    frames = data.frames
    x_frames = np.stack([f.image for f in frames]).astype(np.float32)
    clean_ref = M.predict_distance(reg0, x_frames)

    # attacked inputs are shared between cells using the same model
    keys = sorted({(a, _model_key(d.kind)) for a in attacks for d in defenses})

    def craft(key):
        attack, mk = key
        s = _seed(seed, "attack", attack)
        det, reg = models[f"detector.{mk}"], models[f"regressor.{mk}"]
        ref = M.predict_distance(reg, x_frames)
        return key, (attack_signs(det, attack, signs, settings, s),
                     attack_frames(reg, attack, data.sequences, ref, settings, s))

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        attacked = dict(pool.map(craft, keys))

    cells = [(a, d) for a in attacks for d in defenses]

    def evaluate(cell):
        attack, dcfg = cell
        mk = _model_key(dcfg.kind)
        det, reg = models[f"detector.{mk}"], models[f"regressor.{mk}"]
        xs, xf = attacked[(attack, mk)]
        s = _seed(seed, "defense", dcfg.kind)
        if dcfg.is_input:
            den = models.get("denoiser")
            xs = D.apply_input_defense(dcfg, xs, den, s)
            xf = D.apply_input_defense(dcfg, xf, den, s + 1)
        dm = E.detection_metrics(M.detect(det, xs.astype(np.float32)), gts)
        cond = M.predict_distance(reg, xf.astype(np.float32))
        be = E.binned_signed_error(clean_ref, cond)
        metrics = dict(zip(E.METRIC_COLUMNS[:4], be.means))
        metrics.update(map50=dm.map50, precision=dm.precision, recall=dm.recall)
        return E.ReportRow(attack, dcfg.kind, metrics, _cell_id(attack, dcfg.kind)), be

    def guarded(cell):
        if strict:
            return evaluate(cell)
        try:
            return evaluate(cell)
        except Exception as exc:  # recorded as a failed cell
            return None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(guarded, cells))
    failures = [{"attack": a, "defense": d.kind, "error": err} for (a, d), (row, err) in zip(cells, results) if row is None]
    done = [(row, be, cell) for (row, be), cell in zip(results, cells) if row is not None]

    meta = {"seed": seed, "version": __version__}
    for k in sorted(models):
        m = models[k]
        bundle = getattr(m, "bundle", m)
        if isinstance(bundle, M.ModelBundle):
            meta[f"sha.{k}"] = bundle.checksum()[:16]
    meta.update(metadata or {})
    table = E.ReportTable([row for row, _, _ in done], E.METRIC_COLUMNS, meta, failures)
    if runs_dir is not None:
        for row, be, (_, dcfg) in done:
            write_run_manifest(runs_dir, row, be, meta, dcfg)
    return table


def write_run_manifest(runs_dir, row, binned, meta, dcfg):
    """One INI record per cell so every table entry can be traced back."""
    path = os.path.join(runs_dir, row.run_id)
    os.makedirs(path, exist_ok=True)
    cp = configparser.ConfigParser()
    cp["cell"] = {"attack": row.attack, "defense": row.defense, "k": str(dcfg.k), "bits": str(dcfg.bits),
                  "tau": repr(dcfg.tau)}
    cp["metrics"] = {k: repr(float(v)) for k, v in row.metrics.items()}
    cp["bins"] = {f"{label}.{field_}": repr(float(v)) for label, c, a in zip(E.METRIC_COLUMNS[:4], binned.counts, binned.abs_means)
                  for field_, v in (("count", c), ("abs_mean", a))}
    cp["metadata"] = {k: str(v) for k, v in meta.items()}
    with open(os.path.join(path, "manifest.ini"), "w") as fh:
        fh.write("# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n")
        cp.write(fh)


def plot_series(table, metric):
    """CSV text for one metric: rows are attacks (x axis), columns defenses (series)."""
    attacks = list(dict.fromkeys(r.attack for r in table.rows))
    defenses = list(dict.fromkeys(r.defense for r in table.rows))
    lookup = {(r.attack, r.defense): r.metrics.get(metric) for r in table.rows}
    lines = ["attack," + ",".join(defenses)]
    for a in attacks:
        lines.append(a + "," + ",".join(repr(float(lookup.get((a, d), float("nan")))) for d in defenses))
    return "\n".join(lines) + "\n"
