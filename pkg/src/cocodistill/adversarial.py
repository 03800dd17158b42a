"""Wasserstein-style discriminator on [prediction, image] pairs."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class AdversarialPair:
    D: object
    clip: float = 0.01
    d_steps: int = 1

    def __post_init__(self):
        clip_weights(self.D, self.clip)


@contextmanager
def frozen(net):
    """Temporarily stop gradients into ``net``'s parameters."""
    params = net.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield net
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def scores(D, Y, X):
    Y, X = ad.as_tensor(Y), ad.as_tensor(X)
    if Y.shape[:-3] != X.shape[:-3] or Y.shape[-2:] != X.shape[-2:]:
        raise ad.DimensionError(f"cannot concatenate prediction {Y.shape} with image {X.shape}")
    return D.forward(ad.concat([Y, X], axis=-3)).probs


def disc_loss(D, Y_t, Y_s, X):
    """E[D([Y_t, X])] - E[D([Y_s, X])]; the discriminator maximizes this."""
    Y_t, Y_s = ad.as_tensor(Y_t).detach(), ad.as_tensor(Y_s).detach()
    if Y_t.shape != Y_s.shape:
        raise ad.DimensionError(f"teacher {Y_t.shape} and student {Y_s.shape} predictions differ")
    return ad.sub(ad.mean(scores(D, Y_t, X)), ad.mean(scores(D, Y_s, X)))


def gen_loss(D, Y_s, X):
    """E[D([Y_s, X])] with D frozen; gradient reaches the student only."""
    with frozen(D):
        return ad.mean(scores(D, Y_s, X))


def clip_weights(D, bound):
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    for p in D.parameters():
        np.clip(p.data, -bound, bound, out=p.data)


def disc_step(pair, Y_t, Y_s, X, optimizer):
    """One discriminator update (minimizing the negated objective), then clip."""
    with ad.Tape():
        l_ad = disc_loss(pair.D, Y_t, Y_s, X)
        ad.backward(ad.scale(l_ad, -1.0))
    optimizer.step()
    optimizer.zero_grad()
    clip_weights(pair.D, pair.clip)
    return l_ad.item()
