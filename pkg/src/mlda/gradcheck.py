"""Finite-difference checks for every differentiable operation."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import check_gradient
from .heads import DomainHead, gradient_penalty


def op_cases(rng: np.random.Generator) -> dict[str, tuple]:
    """op name -> (builder(graph, *leaves) -> scalar, input arrays)."""
    n = rng.standard_normal
    labels = rng.integers(0, 4, size=5)
    w_proj = {}

    # random linear readout so every output coordinate matters
    def proj(name, out):
        if name not in w_proj:
            w_proj[name] = rng.standard_normal(out.shape)
        return ad.sum(ad.mul(out, out.graph.constant(w_proj[name])))

    factor = n((3, 4))
    running = (n(3), rng.uniform(0.5, 2.0, 3))
    return {
        "matmul": (lambda g, a, b: proj("matmul", ad.matmul(a, b)), [n((3, 4)), n((4, 2))]),
        "conv1x1": (lambda g, x, w: proj("conv1x1", ad.conv1x1(x, w)), [n((2, 3, 3, 4)), n((4, 5))]),
        "conv3x3-valid": (lambda g, x, w: proj("conv3x3", ad.conv3x3(x, w)),
                          [n((2, 5, 4, 2)), n((3, 3, 2, 3))]),
        "add": (lambda g, a, b: proj("add", ad.add(a, b)), [n((3, 4)), n(4)]),
        "subtract": (lambda g, a, b: proj("subtract", ad.subtract(a, b)), [n((3, 4)), n((3, 4))]),
        "mul-by-scalar": (lambda g, a: proj("scale", ad.scale(a, factor)), [n((3, 4))]),
        "relu": (lambda g, a: proj("relu", ad.relu(a)), [n((4, 5))]),
        "batchnorm": (lambda g, x, ga, be: proj("bn", ad.batchnorm(x, ga, be)),
                      [n((6, 3)), n(3), n(3)]),
        "batchnorm-eval": (lambda g, x, ga, be: proj("bn-eval", ad.batchnorm(
            x, ga, be, training=False, running_mean=running[0], running_var=running[1])),
            [n((6, 3)), n(3), n(3)]),
        "global-avg-pool": (lambda g, x: proj("gap", ad.global_avg_pool(x)), [n((2, 3, 4, 5))]),
        "concat": (lambda g, a, b: proj("concat", ad.concat([a, b])), [n((2, 3)), n((4, 3))]),
        "sum": (lambda g, a: ad.sum(ad.square(ad.sum(a, axis=0))), [n((3, 4))]),
        "mean": (lambda g, a: proj("mean", ad.mean(a, axis=1)), [n((3, 4))]),
        "l2-norm": (lambda g, a: proj("l2", ad.l2_norm(a)), [n((3, 4))]),
        "softmax-cross-entropy": (lambda g, z: ad.mean(ad.softmax_cross_entropy(z, labels)),
                                  [n((5, 4))]),
        "square": (lambda g, a: proj("square", ad.square(a)), [n((3, 4))]),
    }


def op_errors(seeds=range(20), eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per operation over ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (f, xs) in op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check_gradient(f, xs, eps))
    return worst


def penalty_error(width: int, seed: int, reduction: int = 16, batch: int = 8, lam: float = 10.0,
                  eps: float = 1e-5, max_coords: int | None = None) -> float:
    """d(gradient penalty)/d(critic weights) against central differences."""
    rng = np.random.default_rng(seed)
    head = DomainHead(width, mode="wass", reduction=reduction, seed=rng)
    z_b = rng.standard_normal((batch, width))

    def f(g, w1, w2):
        z = g.leaf(z_b)

        def critic(graph, x):
            out = ad.matmul(ad.relu(ad.matmul(x, w1)), w2)
            return ad.mean(out, axis=-1)

        return gradient_penalty(critic, z, lam)

    return check_gradient(f, [head.w1.value, head.w2.value], eps, max_coords=max_coords,
                          seed=seed)
