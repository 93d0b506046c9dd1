"""
Tape autodiff and the two losses
================================

Record a tiny computation, check its gradient against finite differences,
then evaluate the BPR and InfoNCE losses on inputs with known values.
"""

# %%
import math

import numpy as np

from hicon import autodiff as ad
from hicon.autodiff import Tape, backward, grad_check
from hicon.objective import bpr_loss, infonce_loss

tape = Tape()
x = tape.leaf(np.array([[1.0, 2.0], [3.0, -1.0]]), "x")
w = tape.leaf(np.array([[0.5], [-0.5]]), "w")  # one negative, one positive pre-activation
y = ad.total(ad.leaky_relu(ad.matmul(x, w)))
grads = backward(tape, y)
print("y =", float(y.value))
print("dy/dw =", grads[w].ravel())

# %% Finite-difference check of the same function
report = grad_check(lambda L: ad.total(ad.leaky_relu(ad.matmul(L["x"], L["w"]))),
                    {"x": x.value, "w": w.value})
print(report.summary())

# %% BPR: equal scores cost ln 2 per pair, large margins cost nothing
print(float(bpr_loss([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]).value), 3 * math.log(2))
print(float(bpr_loss([30.0], [0.0]).value))

# %% InfoNCE: identical rows give N ln N, orthogonal rows at tau=1 give 2 ln(1 + e^-1)
rows = np.ones((8, 4))
print(float(infonce_loss(rows, rows, 0.6).value), 8 * math.log(8))
print(float(infonce_loss(np.eye(2), np.eye(2), 1.0).value), 2 * math.log(1 + math.exp(-1)))
