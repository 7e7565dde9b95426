"""A tour of the tape-based autodiff core.

Run:  python demos/01_autodiff.py
"""
import numpy as np

from slip import tensor as T
from slip.gradcheck import grad_check

rng = np.random.default_rng(0)

# Leaves that want gradients are plain Tensors with requires_grad=True.
w = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = T.Tensor(rng.normal(size=(4, 3)))

# Every op executed inside the tape context is recorded; backward walks the
# record in reverse and returns a map from leaf to gradient.
with T.GradTape() as tape:
    y = T.gelu(x @ w)
    loss = T.mean(y * y)
grads = tape.backward(loss)
print("loss", loss.item())
print("d loss / d w\n", grads[w])

# A tape is single-use.  Asking twice is a contract error rather than a
# silent double count.
try:
    tape.backward(loss)
except Exception as exc:
    print("second backward:", type(exc).__name__)

# Finite differences in float64 are the oracle for the analytic gradient.
report = grad_check(lambda a, b: T.mean(T.gelu(a @ b) ** 2), [x.data, w.data], name="gelu-matmul")
print(f"{report.name}: max rel err {report.max_rel_err:.2e} ({'ok' if report.passed else 'FAIL'})")

# Switching precision is a context: new tensors pick up the ambient dtype.
with T.precision(np.float64):
    report64 = grad_check(lambda a: T.tsum(T.softmax(a, axis=1) * a), [rng.normal(size=(3, 5))], tolerance=1e-6, dtype=np.float64, name="softmax")
print(f"{report64.name} in float64: {report64.max_rel_err:.2e}")
