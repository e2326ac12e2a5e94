import numpy as np

from spiketicket import tensor as tn


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (x is perturbed in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)), np.max(np.abs(b))))


def analytic(fn, *leaves: tn.Tensor):
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    with tn.Graph() as g:
        out = fn()
    tn.backward(g, out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


def project(out: tn.Tensor, r: np.ndarray) -> tn.Tensor:
    """Scalar loss <out, r> so every output element reaches the gradient."""
    return tn.sum_(tn.mul(out, tn.Tensor(r)))


def op_gradient_error(name: str) -> float:
    """Worst relative error between analytic and central-difference gradients of one op case."""
    build, arrays = OP_CASES[name]
    leaves = [tn.Tensor(a.copy()) for a in arrays]
    r = np.random.default_rng(7).standard_normal(build(*leaves).shape)
    f = lambda: project(build(*leaves), r)
    grads = analytic(f, *leaves)
    return max(rel_err(g, numeric_grad(lambda: f().item(), leaf.data)) for leaf, g in zip(leaves, grads))


rng0 = np.random.default_rng(42)
U = lambda *s: rng0.uniform(-2, 2, s)

# name -> (builder(leaves) -> Tensor, leaf arrays)
OP_CASES = {
    "add": (lambda a, b: tn.add(a, b), [U(3, 4), U(4)]),
    "mul": (lambda a, b: tn.mul(a, b), [U(3, 4), U(3, 1)]),
    "scale": (lambda a: tn.scale(a, -1.7), [U(5)]),
    "matmul": (lambda a, b: tn.matmul(a, b), [U(2, 3, 4), U(4, 2)]),
    "linear": (lambda x, w, b: tn.linear(x, w, b), [U(2, 3, 4), U(5, 4), U(5)]),
    "conv2d": (lambda x, w: tn.conv2d(x, w, stride=2, padding=1), [U(2, 2, 5, 5), U(3, 2, 3, 3)]),
    "conv2d_s1": (lambda x, w: tn.conv2d(x, w, stride=1, padding=0), [U(1, 2, 4, 4), U(2, 2, 3, 3)]),
    "mean_axis": (lambda a: tn.mean(a, axis=1), [U(3, 4, 2)]),
    "l1norm": (lambda a: tn.l1norm(a, axis=-1), [U(3, 4)]),
    "batchnorm": (lambda a: tn.batchnorm_static(a, np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.5, 2.0])), [U(2, 3, 2, 2)]),
    "relu": (lambda a: tn.relu(a), [U(6)]),
    "reshape_transpose": (lambda a: tn.transpose(tn.reshape(a, (3, 2, 2)), (2, 0, 1)), [U(4, 3)]),
    "stack": (lambda a, b: tn.stack([a, b], axis=1), [U(2, 3), U(2, 3)]),
    "take": (lambda a: tn.take(a, [2, 0, 2], axis=1), [U(2, 4)]),
    "sum": (lambda a: tn.sum_(a, axis=0), [U(3, 2)]),
}


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if the criterion failed."""
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"
