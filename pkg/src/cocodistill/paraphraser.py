"""Paraphraser: a conv encoder / transposed-conv decoder trained to reconstruct
teacher taps; afterwards only the encoder is used, frozen."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .nn import NetworkSpec, build_network


class Paraphraser:
    def __init__(self, in_channels, code_channels, seed=0, depth=2, kernel=3):
        spec = NetworkSpec("paraphraser", [code_channels] * depth, in_channels=in_channels, kernel=kernel)
        self.net = build_network(spec, seed)
        self.mode = "training"

    @classmethod
    def from_network(cls, net, mode="paraphrasing"):
        pm = cls.__new__(cls)
        pm.net = net
        pm.mode = "training"
        if mode == "paraphrasing":
            pm.freeze()
        return pm

    @property
    def in_channels(self):
        return self.net.spec.in_channels

    @property
    def code_channels(self):
        return self.net.spec.widths[-1]

    def parameters(self):
        return self.net.parameters()

    def freeze(self):
        self.mode = "paraphrasing"
        for p in self.net.parameters():
            p.requires_grad = False
            p.grad = None


def reconstruction_loss(pm, F_t):
    """Mean squared error between teacher features and their reconstruction."""
    if pm.mode != "training":
        raise ContractError("reconstruction needs a paraphraser in training mode")
    F_t = ad.as_tensor(F_t).detach()
    rec = pm.net.forward(F_t).probs
    return ad.mean(ad.square(ad.sub(rec, F_t)))


def pm_train_step(pm, F_t, optimizer):
    with ad.Tape():
        loss = reconstruction_loss(pm, F_t)
        ad.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return loss.item()


def paraphrase(pm, F_t):
    """Encoder forward only; returns a detached, nonnegative (c_pm, h, w) map."""
    if pm.mode != "paraphrasing":
        raise ContractError("paraphrase needs a frozen paraphraser (call freeze())")
    return Tensor(pm.net.encode(ad.as_tensor(F_t).detach()).data)


def channel_projection(in_channels, out_channels, seed=0):
    """Fixed nonnegative 1x1 projection used when the paraphraser is bypassed.

    Rows sum to one so projected post-ReLU features stay nonnegative and on scale.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7919])))
    w = np.abs(rng.normal(size=(out_channels, in_channels)))
    return w / w.sum(axis=1, keepdims=True)


def project(F_t, weights):
    F = ad.as_tensor(F_t).data
    return Tensor(np.einsum("oc,...chw->...ohw", weights, F))
