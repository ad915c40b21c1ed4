"""How the input-processing defenses and adversarial training cope with FGSM.

Trains a toy sign detector, attacks a test set with FGSM, then tries median
blur, bit-depth reduction, randomisation, DiffPIR restoration and an
adversarially trained detector.  Takes a couple of minutes on one core.

    python demos/defense_tour.py
"""

import numpy as np

from arwb import attacks as A
from arwb import defenses as D
from arwb import evalkit as E
from arwb import models as M
from arwb import scenegen as S

EPS = 8 / 255

signs = S.generate_sign_dataset(300, seed=0)
test = S.generate_sign_dataset(100, seed=0, split="test")
x, gts = test.images().astype(np.float64), test.boxes()

print("Training a standard detector...")
detector = M.init_model(M.DETECTOR, seed=0)
M.train(detector, signs, epochs=15, lr=2e-3, seed=0)


def map50(model, images):
    return E.detection_metrics(M.detect(model, images.astype(np.float32)), gts).map50


attacked = np.stack([r.x_adv for r in A.fgsm(detector, x, gts, A.Budget(epsilon=EPS))])
print(f"clean mAP@50 {map50(detector, x):.3f}, under FGSM {map50(detector, attacked):.3f}\n")

print("Input processing applied to the attacked images:")
for name, out in (("median blur 3x3", D.median_blur(attacked, 3)),
                  ("3-bit colour", D.bit_depth_reduce(attacked, 3)),
                  ("random resize and pad", D.randomize(attacked, seed=0))):
    print(f"  {name:<22} mAP@50 {map50(detector, out):.3f}")

print("\nFitting a small denoiser for DiffPIR restoration...")
denoiser, _ = D.train_denoiser(signs.images()[:200], epochs=5, seed=0)
restored = D.diffpir_restore(attacked, denoiser=denoiser, seed=0)
gain = np.mean([E.psnr(r, c) - E.psnr(a, c) for r, a, c in zip(restored, attacked, x)])
print(f"  DiffPIR                mAP@50 {map50(detector, restored):.3f}, mean PSNR gain {gain:+.2f} dB")

print("\nAdversarial training: FGSM examples crafted on the fly every batch...")
robust, _ = D.adversarial_train(M.init_model(M.DETECTOR, seed=0), signs, A.Budget(epsilon=EPS), 15, 2e-3, seed=0)
attacked_robust = np.stack([r.x_adv for r in A.fgsm(robust, x, gts, A.Budget(epsilon=EPS))])
print(f"  clean mAP@50 {map50(robust, x):.3f}, under white-box FGSM {map50(robust, attacked_robust):.3f}")
