import numpy as np

from sgncap.numerics import Tape, backward, zero_grad


def assert_grads_match(build_fn, tensors, eps=1e-5, tol=1e-5, guard=1e-3,
                       max_entries=None, rng=None):
    """Check backward gradients of a scalar-producing builder against
    central finite differences, entry by entry."""
    def value():
        return float(build_fn().data)

    zero_grad(tensors)
    with Tape() as tape:
        loss = build_fn()
    backward(loss, tape)
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
        idx = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + eps
            up = value()
            flat[j] = old - eps
            down = value()
            flat[j] = old
            num = (up - down) / (2 * eps)
            rel = abs(grad[j] - num) / max(abs(grad[j]), abs(num), guard)
            assert rel < tol, f"entry {j}: analytic {grad[j]:.6g} vs numeric {num:.6g}"
