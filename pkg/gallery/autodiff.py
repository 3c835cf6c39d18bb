"""
Reverse-mode gradients
======================

Every model in the package is built from a small numpy autodiff engine.
Here we differentiate a tiny expression and compare against finite
differences.
"""

# %%
import numpy as np

from jrsv import autodiff as ad
from jrsv.autodiff import Tensor

x = Tensor(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
w = Tensor(np.array([[1.0, 2.0], [0.0, 1.0], [-1.0, 0.5]]), requires_grad=True)
y = ad.sum_(ad.tanh(ad.matmul(x, w)))
ad.backward(y)
print("dy/dx =", x.grad)

# %%
# ``grad_check`` reports the largest relative error between analytic and
# central-difference gradients.
err = ad.grad_check(lambda a, b: ad.sum_(ad.tanh(ad.matmul(a, b))), [x, w])
print("relative error: %.1e" % err)

# %%
# ``stop_gradient`` passes values through and blocks gradients.
z = Tensor(np.array([3.0]), requires_grad=True)
out = ad.sum_(ad.stop_gradient(z) * z)
ad.backward(out)
print("d(sg(z) z)/dz =", z.grad, "(only the un-stopped factor contributes)")

# %%
# The same gradient check, run over every primitive, both networks and every loss.
from jrsv.gradcheck import run_suite

results = run_suite("losses")
print({r.name: f"{r.error:.1e}" for r in results})
