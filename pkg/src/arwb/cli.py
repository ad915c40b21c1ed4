"""Command-line front end.

Every path is taken relative to ``--workdir``; ``ARW_SEED`` overrides any
seed given on the command line or in a config.  Text outputs start with a
``# config_hash=... seed=... version=...`` line.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from . import attacks as A
from . import bench as B
from . import defenses as D
from . import evalkit as E
from . import models as M
from . import scenegen as S
from .config import RunConfig, example_path
from .errors import ArwbError, ConfigError

MODEL_KINDS = {"detector": M.DETECTOR, "regressor": M.REGRESSOR}
DATA_KINDS = {M.DETECTOR: "sign", M.REGRESSOR: "road"}
ATTACK_NAMES = ("gaussian", "fgsm", "autopgd", "simba", "rp2", "cap")
DEFEND_NAMES = {"medianblur": "MedianBlur", "bitdepth": "BitDepth", "randomize": "Randomize", "diffpir": "DiffPIR"}


# ---------------------------------------------------------------------------
# helpers


def _seed(args):
    env = os.environ.get("ARW_SEED")
    return int(env) if env is not None else int(args.seed)


def _path(args, p):
    return os.path.join(args.workdir, p)


def _args_hash(args):
    skip = {"func", "workdir", "jobs"}
    items = sorted((k, v) for k, v in vars(args).items() if k not in skip)
    return hashlib.sha256(repr(items).encode()).hexdigest()[:16]


def _header(config_hash, seed):
    return f"config_hash={config_hash} seed={seed} version={__version__}"


def _write_text(path, text, header):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header}\n")
        fh.write(text)


def _csv(rows, columns):
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else repr(v) for v in r))
    return "\n".join(lines) + "\n"


def _load_data(args, path):
    full = _path(args, path)
    if not os.path.exists(os.path.join(full, "manifest.csv")):
        raise ConfigError(f"no dataset at {path} (manifest.csv missing)")
    return S.read_dataset(full)


def _load_model(args, path, kind=None):
    full = _path(args, path)
    if not os.path.exists(full):
        raise ConfigError(f"no checkpoint at {path}")
    return M.load(full, kind)


def _check_pair(model, data):
    if DATA_KINDS[model.kind] != data.kind:
        raise ConfigError(f"a {model.kind} needs {DATA_KINDS[model.kind]} data, got {data.kind}")


def _write_images(args, directory, images, header):
    os.makedirs(directory, exist_ok=True)
    for i, img in enumerate(images):
        with open(os.path.join(directory, f"{i:05d}.ppm"), "wb") as fh:
            fh.write(S.encode_ppm(np.clip(img, 0, 1), header))


def _curve(report):
    losses = report.losses if hasattr(report, "losses") else []
    return _csv([(i + 1, float(v)) for i, v in enumerate(losses)], ["epoch", "loss"])


def _save_trained(args, model, report, out, header):
    full = _path(args, out)
    os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
    M.save(model, full)
    _write_text(full + ".curve.csv", _curve(report), header)
    print(f"wrote {out} (sha256 {model.checksum()[:16]})")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    seed = _seed(args)
    header = _header(_args_hash(args), seed)
    if args.kind == "sign":
        data = S.generate_sign_dataset(args.n, seed, args.split)
    elif args.kind == "road":
        data = S.generate_road_dataset(args.n, seed, args.split)
    else:
        data = S.sequence_manifest(S.generate_road_sequence(args.n, args.d0, args.d1, seed), seed)
    out = args.out or f"data/{args.kind}-{args.split}"
    S.write_dataset(data, _path(args, out), header)
    print(f"wrote {len(data)} scenes to {out}")
    return 0


def cmd_train(args):
    seed = _seed(args)
    kind = MODEL_KINDS[args.model]
    data = _load_data(args, args.data)
    model = M.init_model(kind, seed)
    _check_pair(model, data)
    report = M.train(model, data, args.epochs, args.lr, seed, args.batch_size)
    _save_trained(args, model, report, args.out or f"ckpt/{args.model}.ckpt", _header(_args_hash(args), seed))
    return 0


def _start_model(args, kind, seed):
    return _load_model(args, args.init, kind) if args.init else M.init_model(kind, seed)


def cmd_advtrain(args):
    seed = _seed(args)
    kind = MODEL_KINDS[args.model]
    data = _load_data(args, args.data)
    model = _start_model(args, kind, seed)
    _check_pair(model, data)
    budget = A.Budget(epsilon=args.eps, alpha=args.alpha, max_iters=args.iters, seed=seed)
    trained, report = D.adversarial_train(model, data, budget, args.epochs, args.lr, seed, attack=args.inner,
                                          batch_size=args.batch_size)
    out = args.out or f"ckpt/{args.model}-adv-{args.inner}.ckpt"
    _save_trained(args, trained, report, out, _header(_args_hash(args), seed))
    return 0


def cmd_contrastive(args):
    seed = _seed(args)
    kind = MODEL_KINDS[args.model]
    data = _load_data(args, args.data)
    model = _start_model(args, kind, seed)
    _check_pair(model, data)
    trained, report = D.contrastive_train(model, data, args.tau, args.epochs, args.lr, seed, args.batch_size,
                                          args.finetune_epochs)
    out = args.out or f"ckpt/{args.model}-contrastive.ckpt"
    header = _header(_args_hash(args), seed)
    _save_trained(args, trained, report.finetune, out, header)
    _write_text(_path(args, out) + ".contrastive.csv", _csv(
        [(i + 1, float(v)) for i, v in enumerate(report.contrastive_losses)], ["epoch", "infonce"]), header)
    return 0


def _scores(model, images):
    if model.kind == M.DETECTOR:
        return M.max_objectness(model, images.astype(np.float32))
    return M.predict_distance(model, images.astype(np.float32))


def cmd_attack(args):
    seed = _seed(args)
    model = _load_model(args, args.model)
    data = _load_data(args, args.data)
    _check_pair(model, data)
    x = data.images().astype(np.float64)
    budget = A.Budget(epsilon=args.eps, alpha=args.alpha, max_iters=args.iters, max_queries=args.queries, seed=seed)
    detector = model.kind == M.DETECTOR
    target = data.boxes() if detector else _scores(model, x)
    mask = None if detector else np.stack([A.box_mask(b) for b in data.boxes()])
    name = args.name
    if name == "gaussian":
        results = A.gaussian_noise(x, args.sigma, seed, mask=mask)
    elif name == "fgsm":
        results = A.fgsm(model, x, target, budget, mask=mask)
    elif name == "autopgd":
        results = A.auto_pgd(model, x, target, budget, mask=mask)
    elif name == "simba":
        results = A.simba(model, x, target, budget, basis=args.basis, mask=mask)
    elif name == "rp2":
        if not detector:
            raise ConfigError("rp2 attacks the sign detector")
        results = [A.AttackResult(x[i], np.zeros_like(x[i])) for i in range(len(x))]
        pos = [i for i, b in enumerate(data.boxes()) if b is not None]
        if pos:
            masks = np.stack([B._sign_mask(data.entries[i]) for i in pos])
            out = A.rp2(model, x[pos], masks, 0, A.TransformSampler(seed=seed), args.lam, args.iters,
                        boxes=[data.boxes()[i] for i in pos], seed=seed, epsilon=args.eps)
            for i, (_, r) in zip(pos, out):
                results[i] = r
    else:
        if detector:
            raise ConfigError("cap attacks the distance regressor")
        results = [r for _, r in A.cap_run(model, data.entries, budget, args.lam)]
    adv = np.stack([r.x_adv for r in results])
    clean_s, adv_s = _scores(model, x), _scores(model, adv)
    rows = []
    for i, r in enumerate(results):
        linf = float(np.max(np.abs(r.delta))) if r.delta.size else 0.0
        l2sq = float(np.sum(np.asarray(r.delta, np.float64) ** 2))
        if name == "simba":
            bound = getattr(r, "accepted_steps", 0) * args.eps ** 2
            ok = l2sq <= bound * (1 + 1e-12)
        elif name == "gaussian":
            bound, ok = float("nan"), True
        else:
            bound = args.eps
            ok = linf <= args.eps
        rows.append((i, linf, l2sq, bound, "1" if ok else "0", r.queries_used, "1" if r.success else "0",
                     float(clean_s[i]), float(adv_s[i])))
    out = os.path.join(_path(args, "out"), args.out or name)
    header = _header(_args_hash(args), seed)
    _write_images(args, os.path.join(out, "images"), adv, header)
    cols = ["index", "linf", "l2sq", "bound", "bound_ok", "queries_used", "success", "clean_score", "adv_score"]
    _write_text(os.path.join(out, "metrics.csv"), _csv(rows, cols), header)
    print(f"attacked {len(rows)} images; bound violations: {sum(r[4] == '0' for r in rows)}")
    return 0


def _summary(model, data, images):
    if model.kind == M.DETECTOR:
        m = E.detection_metrics(M.detect(model, images.astype(np.float32)), data.boxes())
        return {"map50": m.map50, "precision": m.precision, "recall": m.recall}
    pred = M.predict_distance(model, images.astype(np.float32))
    return {"mae_m": float(np.mean(np.abs(pred - data.distances())))}


def cmd_defend(args):
    seed = _seed(args)
    data = _load_data(args, args.data)
    x = data.images().astype(np.float64)
    den = None
    if args.name == "diffpir" and args.denoiser:
        den = D.Denoiser(_load_model(args, args.denoiser, M.DENOISER))
    cfg = D.DefenseConfig(kind=DEFEND_NAMES[args.name], k=args.k, bits=args.bits)
    out_imgs = D.apply_input_defense(cfg, x, den, seed)
    _finish_processed(args, data, x, out_imgs, args.out or args.name, seed)
    return 0


def _finish_processed(args, data, x, processed, name, seed, reference=None):
    out = os.path.join(_path(args, "out"), name)
    header = _header(_args_hash(args), seed)
    _write_images(args, os.path.join(out, "images"), processed, header)
    ref = x if reference is None else reference
    rows = [(i, E.psnr(processed[i], ref[i])) for i in range(len(x))]
    _write_text(os.path.join(out, "metrics.csv"), _csv(rows, ["index", "psnr"]), header)
    if args.model:
        model = _load_model(args, args.model)
        _check_pair(model, data)
        summary = _summary(model, data, processed)
        _write_text(os.path.join(out, "summary.csv"), _csv([tuple(summary.values())], list(summary)), header)
        print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    print(f"processed {len(x)} images into out/{name}")


def cmd_restore(args):
    seed = _seed(args)
    data = _load_data(args, args.data)
    x = data.images().astype(np.float64)
    full = _path(args, args.denoiser)
    if os.path.exists(full):
        den = D.Denoiser(M.load(full, M.DENOISER))
    elif args.train_epochs > 0:
        den, report = D.train_denoiser(x, args.train_epochs, seed=seed)
        _save_trained(args, den.bundle, report, args.denoiser, _header(_args_hash(args), seed))
    else:
        raise ConfigError(f"no denoiser at {args.denoiser}; pass --train-epochs to fit one")
    sched = D.default_schedule(steps=args.steps)
    restored = D.diffpir_restore(x, sched, den, seed)
    clean = _load_data(args, args.clean).images().astype(np.float64) if args.clean else None
    _finish_processed(args, data, x, restored, args.out or "restore", seed, clean)
    return 0


def cmd_report(args):
    with open(_path(args, args.raw), "rb") as fh:
        blob = fh.read()
    table = E.parse_raw(blob)
    first = blob.decode("utf-8").splitlines()[0] if blob else ""
    if first.startswith("# "):
        table.metadata = dict(kv.split("=", 1) for kv in first[2:].split() if "=" in kv)
    text = E.emit_report(table, args.format)
    if args.out:
        full = _path(args, args.out)
        os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
        with open(full, "wb") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text.decode("utf-8"))
    return 0


# ---------------------------------------------------------------------------
# bench


def validate_config(cfg):
    """Reject unknown attack, defense, inner-attack or basis names up front."""
    for a in cfg.names("attack"):
        if a not in B.ATTACKS:
            raise ConfigError(f"unknown attack {a!r} in [attack] names; valid: {', '.join(B.ATTACKS)}")
    for d in cfg.names("defense"):
        if d not in D.KINDS:
            raise ConfigError(f"unknown defense {d!r} in [defense] names; valid: {', '.join(D.KINDS)}")
    if cfg["defense"]["inner"] not in D.INNER_ATTACKS:
        raise ConfigError(f"unknown inner attack {cfg['defense']['inner']!r}")
    if cfg["attack"]["basis"] not in ("pixel", "dct"):
        raise ConfigError(f"unknown SimBA basis {cfg['attack']['basis']!r}")
    for section, key in (("data", "sign_train"), ("data", "sign_test"), ("data", "road_train"),
                         ("data", "sequences"), ("data", "frames")):
        if cfg[section][key] < 1:
            raise ConfigError(f"[{section}] {key} must be >= 1")
    D.DefenseConfig(k=cfg["defense"]["k"], bits=cfg["defense"]["bits"], tau=cfg["defense"]["tau"])


def bench_data(cfg):
    seed = cfg.seed
    d = cfg["data"]
    signs_train = S.generate_sign_dataset(d["sign_train"], seed, "train")
    signs_test = S.generate_sign_dataset(d["sign_test"], seed, "test")
    road_train = S.generate_road_dataset(d["road_train"], seed, "train")
    seqs = [S.generate_road_sequence(d["frames"], d["far_m"], d["near_m"], seed * 1000 + 17 + i)
            for i in range(d["sequences"])]
    return signs_train, road_train, B.BenchData(signs_test, seqs)


def bench_models(cfg, signs_train, road_train, defenses, ckpt_dir=None):
    """Train every checkpoint the requested defenses need."""
    seed = cfg.seed
    m, dfn = cfg["model"], cfg["defense"]
    kinds = {d.kind for d in defenses}
    out = {}
    for name, kind, data, epochs in (("detector", M.DETECTOR, signs_train, m["detector_epochs"]),
                                     ("regressor", M.REGRESSOR, road_train, m["regressor_epochs"])):
        std = M.init_model(kind, seed)
        M.train(std, data, epochs, m["lr"], seed, m["batch_size"])
        out[f"{name}.standard"] = std
        if "AdvTrain" in kinds:
            inner = A.Budget(epsilon=dfn["inner_epsilon"], alpha=cfg["attack"]["alpha"], max_iters=5, seed=seed)
            adv, _ = D.adversarial_train(M.init_model(kind, seed), data, inner, dfn["adv_epochs"], m["lr"], seed,
                                         attack=dfn["inner"], batch_size=m["batch_size"])
            out[f"{name}.adv"] = adv
        if "Contrastive" in kinds:
            con, _ = D.contrastive_train(std, data, dfn["tau"], dfn["contrastive_epochs"], m["lr"], seed,
                                         m["batch_size"], dfn["finetune_epochs"])
            out[f"{name}.contrastive"] = con
    if "DiffPIR" in kinds:
        k = dfn["denoiser_images"]
        imgs = np.concatenate([signs_train.images()[: k // 2], road_train.images()[: k - k // 2]])
        out["denoiser"], _ = D.train_denoiser(imgs, dfn["denoiser_epochs"], seed=seed)
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
        for key, model in out.items():
            M.save(getattr(model, "bundle", model), os.path.join(ckpt_dir, f"{key}.ckpt"))
    return out


def run_bench(cfg, outdir, jobs=1):
    """Full pipeline: data, training, matrix, report and plot files; returns the table."""
    validate_config(cfg)
    dfn, att = cfg["defense"], cfg["attack"]
    defenses = [D.DefenseConfig(kind=k, k=dfn["k"], bits=dfn["bits"], tau=dfn["tau"], seed=cfg.seed)
                for k in cfg.names("defense")]
    signs_train, road_train, data = bench_data(cfg)
    models = bench_models(cfg, signs_train, road_train, defenses, os.path.join(outdir, "ckpt"))
    settings = B.AttackSettings(epsilon=att["epsilon"], alpha=att["alpha"], iters=att["iters"], queries=att["queries"],
                                simba_epsilon=att["simba_epsilon"], sigma=att["sigma"], lam=att["lambda"],
                                basis=att["basis"], rp2_iters=att["rp2_iters"], rp2_samples=att["rp2_samples"],
                                seed=cfg.seed)
    table = B.run_benchmark_matrix(models, cfg.names("attack"), defenses, data, cfg.seed, settings, jobs,
                                   os.path.join(outdir, "runs"), {"config_hash": cfg.hash()}, strict=False)
    write_reports(table, outdir)
    return table


def write_reports(table, outdir):
    os.makedirs(outdir, exist_ok=True)
    for name, fmt in (("report.csv", "csv"), ("report.md", "markdown"), ("report.raw.csv", "raw")):
        with open(os.path.join(outdir, name), "wb") as fh:
            fh.write(E.emit_report(table, fmt))
    head = " ".join(f"{k}={table.metadata[k]}" for k in sorted(table.metadata))
    for metric in table.columns:
        _write_text(os.path.join(outdir, f"fig_{metric}.csv"), B.plot_series(table, metric), head)
    fail_path = os.path.join(outdir, "failures.json")
    if table.failures:
        with open(fail_path, "w", encoding="utf-8") as fh:
            json.dump({"metadata": {k: str(v) for k, v in table.metadata.items()}, "failures": table.failures},
                      fh, indent=1, sort_keys=True)
    elif os.path.exists(fail_path):
        os.remove(fail_path)


def cmd_bench(args):
    cfg = RunConfig.load(_path(args, args.config) if args.config else example_path())
    if args.seed is not None and os.environ.get("ARW_SEED") is None:
        cfg.set("bench", "seed", args.seed)
    jobs = args.jobs if args.jobs else cfg["bench"]["jobs"]
    outdir = _path(args, args.out)
    table = run_bench(cfg, outdir, jobs)
    print(f"{len(table.rows)} cells written to {args.out}; failures: {len(table.failures)}")
    return 0 if not table.failures else 1


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="arwb", description="Adversarial robustness workbench")
    p.add_argument("--workdir", default=".", help="base directory for every relative path")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def positive(v):
        n = int(v)
        if n < 1:
            raise argparse.ArgumentTypeError("must be >= 1")
        return n

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--kind", choices=("sign", "road", "sequence"), required=True)
    g.add_argument("--n", type=positive, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--d0", type=float, default=80.0, help="sequence start distance (m)")
    g.add_argument("--d1", type=float, default=5.0, help="sequence end distance (m)")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    def training(name, func, helptext):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--model", choices=tuple(MODEL_KINDS), required=True)
        t.add_argument("--data", required=True)
        t.add_argument("--epochs", type=int, default=30)
        t.add_argument("--lr", type=float, default=2e-3)
        t.add_argument("--batch-size", type=positive, default=32)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--out")
        t.set_defaults(func=func)
        return t

    training("train", cmd_train, "standard training")
    t = training("advtrain", cmd_advtrain, "min-max adversarial training")
    t.add_argument("--inner", choices=D.INNER_ATTACKS, default="fgsm")
    t.add_argument("--eps", type=float, default=8 / 255)
    t.add_argument("--alpha", type=float, default=2 / 255)
    t.add_argument("--iters", type=positive, default=5)
    t.add_argument("--init", help="checkpoint to start from (default: fresh initialisation)")
    t = training("contrastive", cmd_contrastive, "contrastive pre-training plus fine-tuning")
    t.add_argument("--tau", type=float, default=0.5)
    t.add_argument("--finetune-epochs", type=int, default=None)
    t.add_argument("--init", help="checkpoint to start from (default: fresh initialisation)")

    a = sub.add_parser("attack", help="attack a dataset with one method")
    a.add_argument("--name", choices=ATTACK_NAMES, required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--eps", type=float, default=8 / 255)
    a.add_argument("--alpha", type=float, default=2 / 255)
    a.add_argument("--iters", type=positive, default=10)
    a.add_argument("--queries", type=positive, default=500)
    a.add_argument("--sigma", type=float, default=8 / 255)
    a.add_argument("--lam", type=float, default=0.0)
    a.add_argument("--basis", choices=("pixel", "dct"), default="pixel")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    d = sub.add_parser("defend", help="apply an input-processing defense")
    d.add_argument("--name", choices=tuple(DEFEND_NAMES), required=True)
    d.add_argument("--data", required=True)
    d.add_argument("-k", type=int, default=3)
    d.add_argument("--bits", type=int, default=3)
    d.add_argument("--denoiser", help="denoiser checkpoint for diffpir")
    d.add_argument("--model", help="checkpoint to evaluate on the processed set")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_defend)

    r = sub.add_parser("restore", help="diffusion-style restoration of a dataset")
    r.add_argument("--data", required=True)
    r.add_argument("--denoiser", default="ckpt/denoiser.ckpt")
    r.add_argument("--train-epochs", type=int, default=0)
    r.add_argument("--steps", type=positive, default=10)
    r.add_argument("--clean", help="clean dataset for PSNR")
    r.add_argument("--model", help="checkpoint to evaluate on the restored set")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.set_defaults(func=cmd_restore)

    b = sub.add_parser("bench", help="run the attack x defense matrix from a config")
    b.add_argument("--config", help="INI config (default: the bundled example.cfg)")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--out", default="bench")
    b.set_defaults(func=cmd_bench)

    rp = sub.add_parser("report", help="re-render a raw report sidecar")
    rp.add_argument("--raw", default="bench/report.raw.csv")
    rp.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    except (ArwbError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
