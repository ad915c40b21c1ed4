"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; a normal run lists them in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from arwb import attacks as A
from arwb import bench as B
from arwb import cli
from arwb import defenses as D
from arwb import evalkit as E
from arwb import models as M
from arwb import scenegen as S
from arwb import tensor as T
from arwb.tensor import Tensor

from oracles import ap_oracle, brute_median, detection_fixtures, pr_oracle

pytestmark = pytest.mark.slow

RESULTS = {}
EPS = 8 / 255
SEEDS = (0, 1, 2)


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient soundness


def test_criterion_1_gradient_soundness(detector, regressor):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    signs = S.generate_sign_dataset(10, seed=21)
    roads = S.generate_road_dataset(10, seed=21)
    worst_model = 0.0
    for k in range(10):
        xs = np.clip(signs.images()[k] + rng.normal(0, 0.02, (64, 64, 3)), 0, 1)
        box = [signs.boxes()[k]]
        worst_model = max(worst_model, T.finite_diff_check(
            lambda t: T.tsum(M.detector_loss(detector, T.reshape(t, (1, 64, 64, 3)), box)), xs, max_coords=24, seed=k))
        xr = roads.images()[k]
        dist = roads.distances()[k:k + 1]
        worst_model = max(worst_model, T.finite_diff_check(
            lambda t: T.tsum(M.regressor_loss(regressor, T.reshape(t, (1, 64, 64, 3)), dist)), xr, max_coords=24, seed=k))
    worst_prim = 0.0
    for k in range(10):
        w = Tensor(rng.normal(size=(5, 3)), dtype=np.float64)
        b = Tensor(rng.normal(size=3), dtype=np.float64)
        ker = Tensor(rng.normal(size=(3, 3, 2, 4)), dtype=np.float64)
        worst_prim = max(worst_prim, T.finite_diff_check(lambda t: T.tsum(T.square(T.dense(t, w, b))), rng.normal(size=5)),
                         T.finite_diff_check(lambda t: T.tsum(T.square(T.conv2d(t, ker, stride=2))), rng.normal(size=(7, 7, 2))))
    elapsed = time.perf_counter() - start
    ok = worst_model < 1e-3 and worst_prim < 1e-4 and elapsed < 60
    record(1, ok, f"model max rel err {worst_model:.2e} (<1e-3), primitives {worst_prim:.2e} (<1e-4), {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 2. budget invariants


def test_criterion_2_budget_invariants(detector, regressor):
    signs = S.generate_sign_dataset(500, seed=31, split="test")
    x = signs.images().astype(np.float64)
    boxes = signs.boxes()
    budget = A.Budget(epsilon=EPS, alpha=2 / 255, max_iters=3, max_queries=21, seed=0)
    checks = {}

    def linf_ok(results, xs):
        return sum(np.max(np.abs(r.delta)) <= EPS and np.max(np.abs(r.x_adv - xi)) <= EPS and 0 <= r.x_adv.min()
                   and r.x_adv.max() <= 1 for r, xi in zip(results, xs))

    checks["FGSM"] = linf_ok(A.fgsm(detector, x, boxes, budget), x), 500
    checks["AutoPGD"] = linf_ok(A.auto_pgd(detector, x, boxes, budget), x), 500

    sb = A.Budget(epsilon=0.2, max_queries=21, seed=0)
    simba = A.simba(detector, x, boxes, sb)
    checks["SimBA"] = sum(float(np.sum(r.delta ** 2)) <= r.accepted_steps * 0.2 ** 2 * (1 + 1e-12)
                          and float(np.sum((r.x_adv - xi) ** 2)) <= r.accepted_steps * 0.2 ** 2 * (1 + 1e-12)
                          for r, xi in zip(simba, x)), 500

    pos = S.generate_sign_dataset(720, seed=32, split="test")
    pos_entries = [e for e in pos.entries if e.has_sign][:500]
    xp = np.stack([e.image for e in pos_entries]).astype(np.float64)
    masks = np.stack([B._sign_mask(e) for e in pos_entries])
    rp2 = A.rp2(detector, xp, masks, 0, A.TransformSampler(seed=0), iters=2, samples=1, epsilon=EPS,
                boxes=[e.gt_box for e in pos_entries])
    checks["RP2"] = sum(np.max(np.abs(r.delta)) <= EPS and np.max(np.abs(r.x_adv - xi)) <= EPS
                        and not np.any(r.delta[~m]) for (_, r), xi, m in zip(rp2, xp, masks)), len(pos_entries)

    seqs = [S.generate_road_sequence(50, 80.0, 5.0, seed=40 + i) for i in range(10)]
    x_seq = np.stack([f.image for s in seqs for f in s]).astype(np.float64)
    cap = [r for s in seqs for _, r in A.cap_run(regressor, s, A.Budget(epsilon=EPS, alpha=EPS))]
    checks["CAP"] = linf_ok(cap, x_seq), 500

    # zero budget leaves every input untouched
    z = A.Budget(epsilon=0.0, alpha=2 / 255, max_iters=3, max_queries=21)
    few, fb = x[:8], boxes[:8]
    ident = {
        "Gaussian": A.gaussian_noise(few, 0.0, seed=1),
        "FGSM": A.fgsm(detector, few, fb, z),
        "AutoPGD": A.auto_pgd(detector, few, fb, z),
        "SimBA": A.simba(detector, few, fb, z),
        "RP2": [r for _, r in A.rp2(detector, xp[:8], masks[:8], 0, iters=2, samples=1, epsilon=0.0)],
        "CAP": [r for _, r in A.cap_run(regressor, seqs[0][:8], z)],
    }
    refs = {"RP2": xp[:8], "CAP": x_seq[:8]}
    identity = {k: all(np.array_equal(r.x_adv, xi) for r, xi in zip(v, refs.get(k, few))) for k, v in ident.items()}
    ok = all(c == n == 500 for c, n in checks.values()) and all(identity.values())
    detail = ", ".join(f"{k} {c}/{n}" for k, (c, n) in checks.items())
    record(2, ok, f"bounds held: {detail}; eps=0 identity: {sum(identity.values())}/{len(identity)} attacks")


# ---------------------------------------------------------------------------
# 3. oracle equivalence


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(3)
    median_ok = 0
    for _ in range(100):
        img = rng.random((8, 8, 3))
        median_ok += np.array_equal(D.median_blur(img, 3), brute_median(img, 3))
    pr_ok = 0
    for dets, gts in detection_fixtures():
        same_ap = abs(E.average_precision_50(dets, gts) - ap_oracle(dets, gts)) <= 1e-9
        p, r = E.precision_recall(dets, gts)
        po, ro = pr_oracle(dets, gts, 0.25)
        pr_ok += same_ap and abs(p - po) <= 1e-9 and abs(r - ro) <= 1e-9
    worst = 0.0
    for _ in range(1000):
        y, x0 = rng.random(2)
        rho = rng.uniform(0.01, 50)
        # minimiser of (y - x)^2 + rho (x - x0)^2
        worst = max(worst, abs(D.proximal_step(y, x0, rho) - (y + rho * x0) / (1 + rho)))
    ok = median_ok == 100 and pr_ok == 20 and worst <= 1e-6
    record(3, ok, f"median {median_ok}/100, AP/P/R {pr_ok}/20 fixtures, proximal max err {worst:.1e} over 1000 triples")


# ---------------------------------------------------------------------------
# 4. attack ordering on the regressor


def test_criterion_4_attack_ordering(regressor):
    per_seed = []
    detail = []
    for seed in SEEDS:
        seqs = [S.generate_road_sequence(50, 80.0, 5.0, seed=1000 * seed + 7 + i) for i in range(4)]
        x = np.stack([f.image for s in seqs for f in s]).astype(np.float32)
        ref = M.predict_distance(regressor, x)
        settings = B.AttackSettings(seed=seed)
        err = {}
        for attack in ("Gaussian", "FGSM", "AutoPGD", "CAP/RP2"):
            xa = B.attack_frames(regressor, attack, seqs, ref, settings, seed)
            err[attack] = E.binned_signed_error(ref, M.predict_distance(regressor, xa.astype(np.float32))).abs_means
        near = {k: v[0] for k, v in err.items()}
        comps = [near["AutoPGD"] >= near["CAP/RP2"], near["CAP/RP2"] >= near["FGSM"], near["FGSM"] >= near["Gaussian"],
                 all(err[a][0] > err[a][3] for a in ("FGSM", "AutoPGD", "CAP/RP2"))]
        per_seed.append(sum(comps))
        detail.append("seed {}: APGD {:.1f} CAP {:.1f} FGSM {:.1f} Gauss {:.1f} -> {}/4".format(
            seed, near["AutoPGD"], near["CAP/RP2"], near["FGSM"], near["Gaussian"], sum(comps)))
    ok = all(c >= 3 for c in per_seed)
    record(4, ok, "near-bin |error| (m); " + "; ".join(detail))


# ---------------------------------------------------------------------------
# 5. input-defense efficacy on the detector


def test_criterion_5_defense_efficacy(detector):
    median_votes, bits_votes, detail = 0, 0, []
    for seed in SEEDS:
        signs = S.generate_sign_dataset(200, seed=500 + seed, split="test")
        x = signs.images().astype(np.float64)
        gts = signs.boxes()

        def map50(z):
            return E.detection_metrics(M.detect(detector, z.astype(np.float32)), gts).map50

        clean = map50(x)
        fg = np.stack([r.x_adv for r in A.fgsm(detector, x, gts, A.Budget(epsilon=EPS))])
        ga = np.stack([r.x_adv for r in A.gaussian_noise(x, 0.1, seed=seed)])
        drop_fgsm, drop_fgsm_med = clean - map50(fg), clean - map50(D.median_blur(fg, 3))
        drop_gauss, drop_gauss_bits = clean - map50(ga), clean - map50(D.bit_depth_reduce(ga, 3))
        reduction = 1 - drop_fgsm_med / drop_fgsm if drop_fgsm > 0 else 0.0
        median_votes += reduction >= 0.30
        bits_votes += drop_gauss_bits < drop_gauss
        detail.append(f"seed {seed}: median cuts FGSM drop by {100 * reduction:.0f}%, "
                      f"Gaussian drop {drop_gauss:.3f} -> {drop_gauss_bits:.3f} with 3 bits")
    ok = median_votes >= 2 and bits_votes >= 2
    record(5, ok, f"median {median_votes}/3, bit depth {bits_votes}/3; " + "; ".join(detail))


# ---------------------------------------------------------------------------
# 6. adversarial training


def test_criterion_6_adversarial_training(detector, sign_train, sign_test):
    inner = A.Budget(epsilon=EPS, alpha=2 / 255, max_iters=5)
    adv, _ = D.adversarial_train(M.init_model(M.DETECTOR, seed=0), sign_train, inner, 30, 2e-3, seed=0, attack="fgsm")
    x = sign_test.images().astype(np.float64)
    gts = sign_test.boxes()

    def fgsm_map(model):
        xa = np.stack([r.x_adv for r in A.fgsm(model, x, gts, A.Budget(epsilon=EPS))])
        return E.detection_metrics(M.detect(model, xa.astype(np.float32)), gts).map50

    std_map, adv_map = fgsm_map(detector), fgsm_map(adv)
    small = S.generate_sign_dataset(24, seed=8)
    a = M.init_model(M.DETECTOR, seed=2)
    M.train(a, small, 2, 2e-3, seed=5, batch_size=8)
    b, _ = D.adversarial_train(M.init_model(M.DETECTOR, seed=2), small, A.Budget(epsilon=0.0), 2, 2e-3, seed=5,
                               attack="fgsm", batch_size=8)
    exact = M.to_bytes(a) == M.to_bytes(b)
    ok = adv_map - std_map >= 0.10 and exact
    record(6, ok, f"FGSM mAP@50 standard {std_map:.3f} vs adversarial {adv_map:.3f} "
                  f"(+{100 * (adv_map - std_map):.1f} pp, need +10); eps=0 bit-exact: {exact}")


# ---------------------------------------------------------------------------
# 7. mixed-set protocol


def test_criterion_7_mixed_set():
    sets = [[(a, i) for i in range(416)] for a in range(4)]
    train, test = D.build_mixed_set(sets, 0.25, seed=0)
    counts = []
    for a in range(4):
        tr = {e[1] for e in train.entries if e[0] == a}
        te = {e[1] for e in test.entries if e[0] == a}
        counts.append((len(tr), len(te), not tr & te))
    ok = all(c == (104, 104, True) for c in counts)
    record(7, ok, f"per attack (train, test, disjoint): {counts}")


# ---------------------------------------------------------------------------
# 8. contrastive loss and DiffPIR sanity


def test_criterion_8_infonce_and_diffpir(detector, denoiser, sign_test):
    cases = [
        (np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]), 1.0, -math.log(math.e / (math.e + 2))),
        (np.ones((6, 4)), 0.7, math.log(5)),
        (np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]), 0.5, math.log(3)),
    ]
    infonce_ok = sum(abs(D.infonce_loss(Tensor(z), tau).item() - want) <= 1e-5 for z, tau, want in cases)
    clean = sign_test.images()[:100].astype(np.float64)
    gauss = np.stack([r.x_adv for r in A.gaussian_noise(clean, 0.1, seed=0)])
    fgsm = np.stack([r.x_adv for r in A.fgsm(detector, clean, sign_test.boxes()[:100], A.Budget(epsilon=EPS))])
    rates = {}
    for name, y in (("Gaussian 0.1", gauss), ("FGSM 8/255", fgsm)):
        restored = D.diffpir_restore(y, denoiser=denoiser, seed=0)
        rates[name] = np.mean([E.psnr(r, c) > E.psnr(a, c) for r, a, c in zip(restored, y, clean)])
    ok = infonce_ok == len(cases) and all(v >= 0.8 for v in rates.values())
    record(8, ok, f"InfoNCE hand cases {infonce_ok}/{len(cases)}; PSNR improved on "
                  + ", ".join(f"{k}: {100 * v:.0f}%" for k, v in rates.items()) + " (need 80%)")


# ---------------------------------------------------------------------------
# 9. end-to-end determinism


def test_criterion_9_bench_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("ARW_SEED", raising=False)
    start = time.perf_counter()
    for run in ("first", "second"):
        assert cli.main(["--workdir", str(tmp_path / run), "--jobs", "1", "bench"]) == 0
    elapsed = time.perf_counter() - start
    names = ("report.csv", "report.md", "report.raw.csv")
    same = [(tmp_path / "first" / "bench" / n).read_bytes() == (tmp_path / "second" / "bench" / n).read_bytes()
            for n in names]
    rows = len((tmp_path / "first" / "bench" / "report.csv").read_text().splitlines()) - 2
    ok = all(same) and rows == 42 and elapsed / 2 < 30 * 60
    record(9, ok, f"{sum(same)}/{len(names)} report files byte-identical, {rows} cells, "
                  f"{elapsed / 2:.0f}s per run (<1800s)")

