"""A few minutes with the autodiff engine: build a graph, look at the tape, check gradients."""
import numpy as np

from attnguide import autodiff as ad
from attnguide.autodiff.gradcheck import numerical_grad, relative_error

rng = np.random.default_rng(0)

# small attention-like expression: softmax(x W) summed against a fixed target
x = ad.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
W = ad.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
target = ad.Tensor(rng.uniform(size=(4, 3)))

probs = ad.softmax_rows(ad.matmul(x, W))
loss = ad.sum(probs * target)
tape = ad.backward(loss)

print("loss", loss.item())
print("tape has", len(tape), "nodes:", [n.name for n in tape.nodes])


def f(w):
    with ad.no_grad():
        return ad.sum(ad.softmax_rows(ad.matmul(ad.Tensor(x.data), ad.Tensor(w))) * target).item()


fd = numerical_grad(f, W.data)
print("dL/dW analytic vs central differences: rel err", relative_error(W.grad, fd))

# operands must match exactly, except scalars
try:
    ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(3)))
except ValueError as e:
    print("shape mismatch ->", e)

# wrap-padded smoothing keeps the mass of a map
grid = ad.Tensor(rng.uniform(size=(8, 8)))
k = np.outer([0.25, 0.5, 0.25], [0.25, 0.5, 0.25])
print("mass before / after smoothing:", grid.data.sum(), ad.conv2d_fixed(grid, k).data.sum())
