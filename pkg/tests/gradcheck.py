"""Central finite-difference check of the analytic loss gradient."""

from __future__ import annotations

import numpy as np

from bevterrain import model

EPS = 1e-5


def random_problem(seed, D=24, K=3, hidden=4, cells=16):
    rng = np.random.Generator(np.random.PCG64(seed))
    params = model.init(D, K, hidden, seed)
    params = model.ModelParams(
        params.W1,
        rng.normal(scale=0.3, size=hidden),
        params.W2,
        rng.normal(scale=0.3, size=K),
        rng.normal(size=D),
        rng.uniform(0.5, 2.0, size=D),
        params.hyper,
    )
    x = rng.normal(scale=1.5, size=(cells, D))
    y = rng.integers(0, K, size=cells)
    w = rng.random(cells)
    w[rng.random(cells) < 0.2] = 0.0
    return params, model.TrainBatch(x, y, w)


def numeric_gradient(params, batch, eps=EPS):
    arrays = params.arrays()
    out = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = g.reshape(-1)
        for i in range(arr.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = {k: v.copy() for k, v in arrays.items()}
                pert[name].reshape(-1)[i] += sign * eps
                vals.append(model.loss_and_grad(model.ModelParams(**pert, hyper=params.hyper), batch)[0])
            flat[i] = (vals[0] - vals[1]) / (2 * eps)
        out[name] = g
    return out


def relative_errors(analytic, numeric):
    """Per parameter array: max |a - n| / max(max |n|, max |a|).

    Normalizing by the array's largest gradient magnitude keeps entries whose
    true gradient is zero (dead ReLU units, clamped cells) from dividing
    finite-difference round-off by zero.
    """
    out = {}
    for name, n in numeric.items():
        a = analytic[name]
        scale = max(np.abs(n).max(), np.abs(a).max())
        out[name] = 0.0 if scale == 0 else float(np.abs(a - n).max() / scale)
    return out


def check(seed, **kw):
    params, batch = random_problem(seed, **kw)
    _, analytic = model.loss_and_grad(params, batch)
    return relative_errors(analytic, numeric_gradient(params, batch))
