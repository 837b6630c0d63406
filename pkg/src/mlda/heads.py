"""Per-layer domain classifiers and Wasserstein critics.

A head maps a squeezed tap ``z`` (width C') through two bias-free 1x1
convolutions with a ReLU between them: C' -> ceil(C'/r) -> N'. On a 1x1
spatial map those convolutions are plain matrix products. As a domain
classifier N' is the number of domains; as a critic N' = C' and the critic
value is the mean of the N' outputs.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Node, ShapeError
from .nn import Parameter, glorot, softmax_cross_entropy

Critic = Callable[[Graph, Node], Node]


def hidden_width(in_width: int, reduction: int) -> int:
    return max(1, math.ceil(in_width / reduction))


def head_param_count(in_width: int, reduction: int, n_out: int) -> int:
    h = hidden_width(in_width, reduction)
    return in_width * h + h * n_out


class DomainHead:
    """Domain classifier (``mode="dann"``) or critic (``mode="wass"``) for one tap."""

    def __init__(self, in_width: int, n_out: int | None = None, reduction: int = 16,
                 mode: str = "dann", layer: int = 0, seed: int | np.random.Generator = 0,
                 hidden: int | None = None, bias: bool = False):
        if mode not in ("dann", "wass"):
            raise ValueError(f"unknown head mode {mode!r}")
        if in_width < 1 or reduction < 1:
            raise ValueError("in_width and reduction must be positive")
        if mode == "wass":
            n_out = in_width if n_out is None else n_out
        elif n_out is None or n_out < 2:
            raise ValueError("a domain classifier needs n_out >= 2 domains")
        self.mode = mode
        self.layer = layer
        self.in_width = in_width
        self.reduction = reduction
        self.n_out = n_out
        self.hidden = hidden_width(in_width, reduction) if hidden is None else hidden
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.w1 = Parameter(glorot(rng, (in_width, self.hidden), in_width, self.hidden),
                            f"head{layer}.w1")
        self.w2 = Parameter(glorot(rng, (self.hidden, n_out), self.hidden, n_out),
                            f"head{layer}.w2")
        # off for the standard head; a hidden bias lets low-dimensional
        # critics move their ReLU hinges away from the origin
        self.b1 = Parameter(np.zeros(self.hidden), f"head{layer}.b1") if bias else None

    @property
    def params(self) -> list[Parameter]:
        return [self.w1, self.w2] + ([self.b1] if self.b1 is not None else [])

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params)

    def _weights(self, g: Graph, frozen: bool):
        if frozen:
            return [g.constant(p.value) for p in self.params]
        return [g.param(p) for p in self.params]

    def forward(self, g: Graph, z: Node, frozen: bool = False) -> Node:
        """``relu(z @ W1) @ W2`` for z of shape (m, C') or (C',)."""
        if z.shape[-1] != self.in_width:
            raise ShapeError(f"head{self.layer}: expected width {self.in_width}, got {z.shape[-1]}")
        single = z.value.ndim == 1
        if single:
            z = ad.reshape(z, (1, -1))
        w1, w2, *b1 = self._weights(g, frozen)
        pre = ad.matmul(z, w1)
        if b1:
            pre = ad.add(pre, b1[0])
        out = ad.matmul(ad.relu(pre), w2)
        return ad.reshape(out, (self.n_out,)) if single else out

    def critic(self, g: Graph, z: Node, frozen: bool = False) -> Node:
        """Scalar critic value per sample: mean over the N' outputs."""
        return ad.mean(self.forward(g, z, frozen), axis=-1)

    def frozen_critic(self, g: Graph, z: Node) -> Node:
        return self.critic(g, z, frozen=True)


def grl(z: Node, scale: float = 1.0) -> Node:
    """Gradient reversal layer."""
    if scale < 0:
        raise ValueError("grl scale must be non-negative")
    return ad.grl(z, scale)


def _check_pairing(taps, heads):
    if len(taps) != len(heads):
        raise ValueError(f"{len(taps)} taps but {len(heads)} heads")


def ldann_loss(taps: Sequence[Node], heads: Sequence[DomainHead], domain_labels,
               grl_scale: float = 1.0) -> Node:
    """Sum over tapped layers of the batch-mean domain cross-entropy.

    Each ``taps[i]`` holds squeezed features of a mixed source/target batch,
    ``domain_labels`` the domain index of each row.
    """
    _check_pairing(taps, heads)
    if not taps:
        raise ValueError("ldann_loss: no taps")
    total = None
    for z, head in zip(taps, heads):
        g = z.graph
        logits = head.forward(g, grl(z, grl_scale))
        term = softmax_cross_entropy(logits, domain_labels)
        total = term if total is None else ad.add(total, term)
    return total


def interpolate(z_s: Node, z_t: Node, eps) -> Node:
    """``eps * z_s + (1 - eps) * z_t``; ``eps`` is a scalar or one value per row."""
    if z_s.shape != z_t.shape:
        raise ShapeError(f"interpolate: source {z_s.shape} vs target {z_t.shape}")
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps < 0) or np.any(eps > 1):
        raise ValueError("interpolate: eps must lie in [0, 1]")
    if eps.ndim == 1:
        eps = eps[:, None]
    return ad.add(ad.scale(z_s, eps), ad.scale(z_t, 1.0 - eps))


def input_gradient(critic: Critic, z: Node) -> Node:
    """Recorded d(sum critic(z))/dz, itself differentiable."""
    g = z.graph
    value = critic(g, z)
    return ad.backward(g, ad.sum(value), wrt=[z], create_graph=True).of(z)


def gradient_penalty(critic: Critic, z_b: Node, lam: float) -> Node:
    """``lam * mean_i (||grad_z critic(z_b_i)||_2 - 1)^2``."""
    if lam < 0:
        raise ValueError("gradient penalty coefficient must be non-negative")
    g = z_b.graph
    grad = input_gradient(critic, z_b)
    if not isinstance(grad, Node):
        # critic does not depend on its input
        grad = g.constant(grad)
    if grad.value.ndim == 1:
        grad = ad.reshape(grad, (1, -1))
    gap = ad.subtract(ad.l2_norm(grad, axis=-1), g.constant(1.0))
    return ad.scale(ad.mean(ad.square(gap)), lam)


def critic_estimate(critic: Critic, z_s: Node, z_t: Node) -> Node:
    """Batch estimate of mean D(z_s) - mean D(z_t)."""
    g = z_s.graph
    return ad.subtract(ad.mean(critic(g, z_s)), ad.mean(critic(g, z_t)))


def critic_loss(critic: Critic, z_s: Node, z_t: Node, z_b: Node, lam: float,
                literal: bool = False) -> Node:
    """Objective the critic minimises.

    Default: ``-(D(z_s) - D(z_t)) + GP``. With ``literal`` the sign-flipped form
    ``D(z_s) - D(z_t) - GP`` is minimised instead.
    """
    est = critic_estimate(critic, z_s, z_t)
    gp = gradient_penalty(critic, z_b, lam)
    if literal:
        return ad.subtract(est, gp)
    return ad.add(ad.scale(est, -1.0), gp)


def lwass_feature_loss(taps_source: Sequence[Node], taps_target: Sequence[Node],
                       heads: Sequence[DomainHead], beta: float) -> Node:
    """``beta * sum_j (mean D_j(z_s) - mean D_j(z_t))`` with the critics frozen."""
    _check_pairing(taps_source, heads)
    _check_pairing(taps_target, heads)
    if not heads:
        raise ValueError("lwass_feature_loss: no taps")
    total = None
    for zs, zt, head in zip(taps_source, taps_target, heads):
        term = critic_estimate(head.frozen_critic, zs, zt)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, beta)
