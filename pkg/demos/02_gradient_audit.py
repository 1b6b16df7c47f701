"""The reverse-mode tape and its finite-difference audit.

Builds a tiny expression on the tape, backpropagates it, and compares every
gradient against central finite differences; then runs the package's full
audit, which covers each primitive op plus the complete rendering and
masked-alignment loss paths on a micro configuration.

Run:  python3 demos/02_gradient_audit.py
"""
import numpy as np

from mrvm_nerf import autodiff as ad

# --- a small expression by hand ------------------------------------------
x = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
w = ad.Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
loss = (ad.sigmoid(x * w) ** 2).sum()
ad.backward(loss)
print("loss                 ", loss.value)
print("d loss / d x         ", x.grad)
print("d loss / d w         ", w.grad)

# the same gradients by central differences
ps = ad.ParamStore(0)
ps.add("x", (3,), init="zeros")
ps["x"] = np.array([1.0, 2.0, 3.0])


def f(leaves):
    return (ad.sigmoid(leaves["x"] * w.value) ** 2).sum()


err = ad.finite_diff_check(f, ps, 1e-5)
print(f"finite-difference relative error: {err:.2e}")

# --- the full package audit ----------------------------------------------
print("\nfull audit (every op + end-to-end render and alignment losses):")
from mrvm_nerf.gradcheck import run_gradcheck

worst = run_gradcheck(verbose=True)
print(f"\nworst relative error anywhere: {worst:.2e}")
