"""Central finite-difference gradient oracle, independent of the autodiff path."""

import numpy as np

from graspil.tensor import Tensor, backward


def fd_gradient(f, arrays, idx, h=1e-5):
    """d f / d arrays[idx] by central differences; f maps plain arrays to a float."""
    x = arrays[idx]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*arrays)
        flat[i] = orig - h
        fm = f(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradients(build, arrays, tol=1e-4, h=1e-5):
    """Compare autodiff gradients of `build` against finite differences.

    `build` maps Tensors to a scalar Tensor; `arrays` are the leaf values.
    Error metric per element: |a - n| / max(1, |a|, |n|).
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    backward(loss)

    def as_float(*arrs):
        plain = [Tensor(a) for a in arrs]
        return float(build(*plain).data)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = fd_gradient(as_float, [a.copy() for a in arrays], i, h=h)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = np.abs(analytic - numeric) / denom
        worst = max(worst, float(err.max()) if err.size else 0.0)
    assert worst < tol, f"gradient mismatch: max combined error {worst:.3e} >= {tol}"
    return worst


def check_param_gradients(loss_fn, params, tol=1e-3, h=1e-5, max_coords=8, seed=0):
    """FD-check d loss / d p for named parameter Tensors mutated in place.

    `loss_fn` rebuilds the graph from the live Tensor objects, so perturbing
    `p.data` and re-evaluating gives the numeric derivative. Large tensors are
    probed at `max_coords` seeded random coordinates.
    """
    import graspil.tensor as gt

    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    def eval_loss():
        with gt.no_grad():
            return float(loss_fn().data)

    rng = np.random.default_rng(seed)
    worst = (0.0, None)
    for k, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        aflat = analytic[k].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_loss()
            flat[i] = orig - h
            fm = eval_loss()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]), abs(num))
            if err > worst[0]:
                worst = (err, f"{k}[{i}] analytic={aflat[i]:.6g} numeric={num:.6g}")
    assert worst[0] < tol, f"param gradient mismatch: {worst[1]} (err {worst[0]:.3e})"
    return worst[0]
