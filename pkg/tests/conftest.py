import numpy as np


def rel_err(a, n) -> float:
    """max |a - n| / max(max |a|, max |n|), guarded against an all-zero pair."""
    a = np.concatenate([np.ravel(x) for x in a])
    n = np.concatenate([np.ravel(x) for x in n])
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    return float(np.abs(a - n).max() / scale)


def fd_grads(loss_fn, params, h=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of ``params`` (in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss_fn()
            p[i] = old - h
            down = loss_fn()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relu_margin(net, x) -> float:
    """Smallest |pre-activation| over ReLU layers; finite differences are only valid away from 0."""
    tr = net.forward(x)
    vals = [np.abs(z).min() for z, a in zip(tr.pre, net.activations) if a == "relu"]
    return min(vals) if vals else np.inf
