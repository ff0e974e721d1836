"""
Segmentation losses
===================

Soft Dice, BCE, their half/half mix and the class-weighted BCE on a
toy prediction, plus how the class weights react to gland size.
"""

import numpy as np

from screenseg.losses import bce, class_weights, dice_bce, dice_loss, w_bce

target = np.zeros((32, 32))
target[8:20, 10:22] = 1
for blur in (0.9, 0.7, 0.5):
    pred = np.where(target == 1, blur, 1 - blur)
    print(
        f"p={blur}: dice_loss {float(dice_loss(pred, target)):.4f}  bce {float(bce(pred, target)):.4f}  "
        f"dice_bce {float(dice_bce(pred, target)):.4f}  w_bce {float(w_bce(pred, target)):.4f}"
    )

# small glands put almost all the weight on one term
for n in (2, 10, 100, 500):
    t = np.zeros((32, 32))
    t.flat[:n] = 1
    w = class_weights(t)
    print(f"{n:4d} positive pixels -> w0={w.w0:.4f} w1={w.w1:.4f}")
