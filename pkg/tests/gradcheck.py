"""Central finite-difference gradient oracle shared by the unit and acceptance tests."""
import numpy as np

from higo import arraycore as ac

H_STEP = 1e-5
# central differences carry ~eps*|loss|/h ~ 1e-10 of round-off; gradients below
# this floor (e.g. shift-invariant softmax biases, exactly zero) compare absolutely
NORM_FLOOR = 1e-6


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), NORM_FLOOR))


def check(fn, inputs, h=H_STEP, max_entries=None, rng=None):
    """Compare reverse-mode gradients of ``fn(*arrays)`` (a scalar) to central differences.

    ``inputs`` is a list of numpy arrays. When ``max_entries`` is set, each
    input is probed on at most that many randomly chosen coordinates.
    Returns the worst relative error over all inputs.
    """
    leaves = [ac.Parameter(np.array(x, dtype=np.float64), name=f"x{i}") for i, x in enumerate(inputs)]
    with ac.tape():
        out = fn(*leaves)
        ac.backward(out)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for leaf in leaves:
        coords = np.arange(leaf.size)
        if max_entries is not None and leaf.size > max_entries:
            coords = rng.choice(leaf.size, size=max_entries, replace=False)
        num = np.zeros(len(coords))
        flat = leaf.data.reshape(-1)
        for k, c in enumerate(coords):
            orig = flat[c]
            with ac.no_grad():
                flat[c] = orig + h
                fp = float(fn(*leaves).data)
                flat[c] = orig - h
                fm = float(fn(*leaves).data)
            flat[c] = orig
            num[k] = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(leaf.grad.reshape(-1)[coords], num))
    return worst


def check_params(loss_fn, params, h=H_STEP, per_param=3, rng=None, names=None):
    """Finite-difference check over entries of a ``ModelParams`` store.

    Returns ``{name: rel_err}`` comparing analytic and numerical gradients
    on ``per_param`` random coordinates of each parameter.
    """
    rng = rng or np.random.default_rng(0)
    params.zero_grad()
    with ac.tape():
        loss = loss_fn()
        ac.backward(loss)
    out = {}
    for name in names or list(params):
        p = params[name]
        flat = p.data.reshape(-1)
        coords = rng.choice(p.size, size=min(per_param, p.size), replace=False)
        num = np.zeros(len(coords))
        for k, c in enumerate(coords):
            orig = flat[c]
            with ac.no_grad():
                flat[c] = orig + h
                fp = float(loss_fn().data)
                flat[c] = orig - h
                fm = float(loss_fn().data)
            flat[c] = orig
            num[k] = (fp - fm) / (2 * h)
        out[name] = rel_err(p.grad.reshape(-1)[coords], num)
    return out
