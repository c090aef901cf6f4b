"""What the alignment losses measure, on batches you can reason about.

Run:  python demos/02_alignment_losses.py
"""

import numpy as np

from msdalab.autodiff import Tensor, softmax_rows
from msdalab.losses import (
    KernelConfig,
    LossWeights,
    class_discrepancy,
    coral_loss,
    cross_entropy,
    feature_discrepancy,
    mmd_squared,
    total_loss,
)

rng = np.random.default_rng(42)
cfg = KernelConfig()  # multi-bandwidth Gaussian, median-heuristic base

print("== squared MMD: distance between feature distributions ==")
same = rng.normal(size=(64, 8))
shifted = rng.normal(size=(64, 8)) + 1.5
print(f"same distribution:     {mmd_squared(Tensor(same), Tensor(rng.normal(size=(64, 8))), cfg).item():.4f}")
print(f"mean-shifted by 1.5:   {mmd_squared(Tensor(same), Tensor(shifted), cfg).item():.4f}")
print(f"identical batch:       {mmd_squared(Tensor(same), Tensor(same), cfg).item():.4f}")

print("\n== CORAL: distance between second-order statistics ==")
narrow = rng.normal(size=(64, 8)) * 0.5
wide = rng.normal(size=(64, 8)) * 2.0
print(f"equal covariances:     {coral_loss(Tensor(narrow), Tensor(narrow * 1.0)).item():.4f}")
print(f"0.5x vs 2x scale:      {coral_loss(Tensor(narrow), Tensor(wide)).item():.4f}")

print("\n== feature discrepancy = MMD + CORAL ==")
fd = feature_discrepancy(Tensor(narrow), Tensor(wide), cfg)
print(f"combined:              {fd.item():.4f}")

print("\n== class discrepancy: do the classifiers agree on the target? ==")
logits_a = rng.normal(size=(32, 2))
agree = [softmax_rows(Tensor(logits_a)), softmax_rows(Tensor(logits_a + 0.05 * rng.normal(size=(32, 2))))]
disagree = [softmax_rows(Tensor(logits_a)), softmax_rows(Tensor(-logits_a))]
print(f"nearly agreeing pair:  {class_discrepancy(agree).item():.4f}")
print(f"opposed pair:          {class_discrepancy(disagree).item():.4f}")

print("\n== the total objective ==")
cl = cross_entropy(Tensor(logits_a), rng.integers(0, 2, 32))
cd = class_discrepancy(disagree)
w = LossWeights()
print(f"cl={cl.item():.4f} fd={fd.item():.4f} cd={cd.item():.4f} "
      f"(lam={w.lam}, gamma={w.gamma})")
print(f"total = {total_loss(cl, fd, cd, w).item():.4f}")
