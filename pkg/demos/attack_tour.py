"""A short tour of the attacks on freshly trained toy models.

Trains a small sign detector and distance regressor, then walks through
Gaussian noise, FGSM, Auto-PGD, SimBA, an RP2 patch and a CAP sequence attack,
printing what each one does to the models.  Takes about a minute on one core.

    python demos/attack_tour.py
"""

import numpy as np

from arwb import attacks as A
from arwb import bench as B
from arwb import evalkit as E
from arwb import models as M
from arwb import scenegen as S

EPS = 8 / 255

print("Training a detector on 300 sign scenes and a regressor on 800 road scenes...")
signs = S.generate_sign_dataset(300, seed=0)
roads = S.generate_road_dataset(800, seed=0)
detector = M.init_model(M.DETECTOR, seed=0)
M.train(detector, signs, epochs=15, lr=2e-3, seed=0)
regressor = M.init_model(M.REGRESSOR, seed=0)
M.train(regressor, roads, epochs=10, lr=2e-3, seed=0)

test = S.generate_sign_dataset(100, seed=0, split="test")
x, gts = test.images().astype(np.float64), test.boxes()


def map50(images):
    return E.detection_metrics(M.detect(detector, images.astype(np.float32)), gts).map50


print(f"\nClean detector mAP@50: {map50(x):.3f}")

# Random noise of the same scale barely matters; a signed gradient step does.
noisy = np.stack([r.x_adv for r in A.gaussian_noise(x, EPS, seed=0)])
print(f"Gaussian noise, sigma = 8/255:  mAP@50 {map50(noisy):.3f}")
budget = A.Budget(epsilon=EPS, alpha=2 / 255, max_iters=10)
fgsm = A.fgsm(detector, x, gts, budget)
print(f"FGSM, eps = 8/255:              mAP@50 {map50(np.stack([r.x_adv for r in fgsm])):.3f}")
apgd = A.auto_pgd(detector, x, gts, budget)
print(f"Auto-PGD, 10 steps:             mAP@50 {map50(np.stack([r.x_adv for r in apgd])):.3f}")
print(f"  every perturbation stays inside the budget: {max(np.abs(r.delta).max() for r in apgd) <= EPS}")

# SimBA sees only the score, never the gradient.
simba = A.simba(detector, x[:20], gts[:20], A.Budget(epsilon=0.2, max_queries=201, seed=0))
print(f"\nSimBA on 20 scenes, 200 queries: {sum(r.success for r in simba)} succeeded, "
      f"mean accepted steps {np.mean([r.accepted_steps for r in simba]):.1f}")

# RP2 paints a patch on the sign face that survives viewpoint changes.
pos = [e for e in test.entries if e.has_sign][:4]
xp = np.stack([e.image for e in pos]).astype(np.float64)
masks = np.stack([B._sign_mask(e) for e in pos])
sampler = A.TransformSampler(seed=0)
patched = A.rp2(detector, xp, masks, 0, sampler, iters=60, samples=4, boxes=[e.gt_box for e in pos])
for e, xi, (state, _) in zip(pos, xp, patched):
    before = A.transformed_objectness(detector, xi, np.zeros_like(xi), e.gt_box, sampler, 16)
    after = A.transformed_objectness(detector, xi, state.delta, e.gt_box, sampler, 16)
    print(f"RP2 patch: mean objectness over 16 views {before:.2f} -> {after:.2f}")

# CAP carries one patch along an approaching lead vehicle.
seq = S.generate_road_sequence(50, 80.0, 5.0, seed=1)
frames = np.stack([f.image for f in seq]).astype(np.float32)
clean = M.predict_distance(regressor, frames)
cap = A.cap_run(regressor, seq, A.Budget(epsilon=EPS, alpha=EPS))
attacked = M.predict_distance(regressor, np.stack([r.x_adv for _, r in cap]).astype(np.float32))
binned = E.binned_signed_error(clean, attacked)
print("\nCAP over a 50-frame approach, mean distance error by range bin:")
for label, err in binned.as_dict().items():
    print(f"  {label:>8} m: {err:+.1f} m")
