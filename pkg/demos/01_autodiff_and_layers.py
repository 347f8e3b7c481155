"""
Tape autodiff and the building-block layers
===========================================

Build a tiny conv -> relu -> pool graph by hand, run backward, and compare
one analytic gradient against a central finite difference. Then push a
feature map through the SE gate and the two-step ConvLSTM fusion.
"""

import numpy as np

from mcgkt import tensor as T
from mcgkt.gradcheck import check_op
from mcgkt.layers import ConvLSTMParams, SEParams, ikt_fuse, se_gate
from mcgkt.tensor import Tensor

rng = np.random.default_rng(0)

# leaves that require grad get a .grad after backward
x = Tensor(rng.standard_normal((1, 2, 6, 6)))
w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)
target = Tensor(np.zeros((1, 3, 3, 3)))

loss = T.mse_loss(T.maxpool2x2(T.relu(T.conv2d(x, w, b))), target)
T.backward(loss)
print("loss", float(loss.data))
print("dL/dw[0,0] =\n", w.grad[0, 0].round(4))


# finite difference on one weight entry
def loss_at(wv):
    out = T.maxpool2x2(T.relu(T.conv2d(x, Tensor(wv), b)))
    return float(T.mse_loss(out, target).data)


h = 1e-3
wp, wm = w.data.copy(), w.data.copy()
wp[0, 0, 1, 1] += h
wm[0, 0, 1, 1] -= h
print("analytic", w.grad[0, 0, 1, 1], "numeric", (loss_at(wp) - loss_at(wm)) / (2 * h))

# the packaged checker runs the same comparison over random instances
r = check_op("conv2d", instances=5)
print("conv2d gradcheck worst relative error", f"{r.worst:.2e}", "passed" if r.passed else "FAILED")

# squeeze-and-excitation: zero FC weights give a gate of exactly 0.5
feat = Tensor(rng.standard_normal((1, 8, 4, 4)))
print("zero SE gate ratio", (se_gate(feat, SEParams.zeros(8, 4, np.float64)).data / feat.data).mean())

# ConvLSTM fusion: zero weights keep the cell at 0, so the output is 0
e_out = Tensor(rng.standard_normal((1, 4, 8, 8)))
d_in = Tensor(rng.standard_normal((1, 4, 8, 8)))
print("zero ConvLSTM max |out|", np.abs(ikt_fuse(e_out, d_in, ConvLSTMParams.zeros(4)).data).max())
