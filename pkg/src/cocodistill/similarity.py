"""Channel-mixed spatial similarity, cross-layer correlation and the losses built on them.

Feature maps are ``(c, h, w)`` or batched ``(n, c, h, w)`` tensors; pixels are
indexed row-major, so a map reshapes to ``G`` of shape ``(hw, c)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, ContractError, DimensionError, Tensor
from .data import write_pnm

NORMALIZATIONS = ("as-written", "cosine")


@dataclass
class SimilarityMap:
    M: Tensor  # (..., hw, hw)
    source: str | None
    source_shape: tuple

    @property
    def hw(self):
        return self.M.shape[-1]


@dataclass
class CorrelationValue:
    phi: Tensor  # scalar, or (n,) for a batch
    taps: tuple


def channel_weights(F):
    """Softmax over per-channel spatial maxima."""
    return ad.softmax_axis(ad.global_max_pool(F), axis=-1)


def _rows(F):
    c, h, w = F.shape[-3:]
    return ad.transpose2d(ad.reshape(F, F.shape[:-2] + (h * w,)))


def mix_channels(F):
    """Scale column j of G = reshape(F) by the j-th channel weight."""
    c = F.shape[-3]
    wts = channel_weights(F)
    return ad.mul(_rows(F), ad.reshape(wts, wts.shape[:-1] + (1, c)))


def _check_nonnegative(F):
    if F.data.size and F.data.min() < 0:
        raise ContractError("similarity maps need nonnegative features (tap post-ReLU activations)")


def _similarity(rows, normalization):
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")
    num = ad.matmul(rows, ad.transpose2d(rows))
    if normalization == "as-written":
        # square roots of plain row sums, as the formula is printed
        d = ad.sqrt_eps(ad.sum(rows, axis=-1))
    else:
        d = ad.sqrt_eps(ad.sum(ad.square(rows), axis=-1))
    return ad.div_outer(num, d)


def similarity_map(F, normalization="as-written", source=None):
    F = ad.as_tensor(F)
    _check_nonnegative(F)
    return SimilarityMap(_similarity(mix_channels(F), normalization), source, tuple(F.shape[-3:]))


def spatial_similarity_only(F, normalization="as-written", source=None):
    """Same map without channel mixing: raw G, unit weights."""
    F = ad.as_tensor(F)
    _check_nonnegative(F)
    return SimilarityMap(_similarity(_rows(F), normalization), source, tuple(F.shape[-3:]))


def correlation(Ma, Mb):
    """Cosine similarity of the flattened maps; 0 when the norm product vanishes."""
    a = Ma.M if isinstance(Ma, SimilarityMap) else Ma
    b = Mb.M if isinstance(Mb, SimilarityMap) else Mb
    if a.shape != b.shape:
        raise DimensionError(f"correlation needs equal-size maps, got {a.shape} and {b.shape}")
    lead = a.shape[:-2]
    qa = ad.reshape(a, lead + (-1,))
    qb = ad.reshape(b, lead + (-1,))
    names = (getattr(Ma, "source", None), getattr(Mb, "source", None))
    return CorrelationValue(ad.cosine(qa, qb, EPS), names)


def common_size(*maps):
    """Smallest (h, w) among the maps; all others pool down to it."""
    sizes = sorted({tuple(m.shape[-2:]) for m in maps}, key=lambda s: s[0] * s[1])
    return sizes[0]


def align(F, size):
    return ad.pool_resize(ad.as_tensor(F), size)


def pair_correlation(shallow, deep, normalization="as-written", size=None, mixed=True):
    size = size or common_size(shallow, deep)
    sim = similarity_map if mixed else spatial_similarity_only
    return correlation(sim(align(shallow, size), normalization), sim(align(deep, size), normalization))


def _pair_maps(teacher_taps, student_taps, pair):
    t = [teacher_taps[n] for n in pair.teacher]
    s = [student_taps[n] for n in pair.student]
    return t, s, common_size(*t, *s)


def coco_gap(phi_s, phi_t):
    """Squared student-teacher correlation gap, averaged over the batch."""
    phi_t = ad.as_tensor(phi_t).detach()
    return ad.mean(ad.square(ad.sub(ad.as_tensor(phi_s), phi_t)))


def teacher_correlations(teacher_taps, pairs, sizes, normalization="as-written"):
    """Per-pair teacher correlations at the given comparison sizes (no gradient)."""
    out = []
    for pair, size in zip(pairs, sizes):
        t = [ad.as_tensor(teacher_taps[n]).detach() for n in pair.teacher]
        out.append(pair_correlation(t[0], t[1], normalization, size).phi.data)
    return out


def coco_loss(teacher_taps, student_taps, pairs, normalization="as-written"):
    """Mean over pairs (and batch) of the squared gap between teacher and student
    cross-layer correlations. Teacher values never carry gradient."""
    if not pairs:
        raise ContractError("coco_loss needs at least one tap pair")
    sizes = [_pair_maps(teacher_taps, student_taps, p)[2] for p in pairs]
    phi_t = teacher_correlations(teacher_taps, pairs, sizes, normalization)
    return coco_loss_cached(phi_t, student_taps, pairs, sizes, normalization)


def coco_loss_cached(teacher_phi, student_taps, pairs, sizes, normalization="as-written"):
    """coco_loss with the teacher correlations already computed, one array per pair."""
    if not pairs:
        raise ContractError("coco_loss needs at least one tap pair")
    terms = []
    for pair, phi_t, size in zip(pairs, teacher_phi, sizes):
        s = [ad.as_tensor(student_taps[n]) for n in pair.student]
        terms.append(coco_gap(pair_correlation(s[0], s[1], normalization, size).phi, phi_t))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(terms))


def similarity_mimic_loss(teacher_taps, student_taps, pairs, mixed, normalization="as-written"):
    """Direct map mimicry for the SS (mixed=False) and CMSS (mixed=True) arms:
    ||M_t - M_s||^2 / hw^2 per matched tap, averaged over taps and batch."""
    if not pairs:
        raise ContractError("similarity mimicry needs at least one tap pair")
    sim = similarity_map if mixed else spatial_similarity_only
    terms = []
    for pair in pairs:
        t, s, size = _pair_maps(teacher_taps, student_taps, pair)
        for ft, fs in zip(t, s):
            mt = sim(align(ad.as_tensor(ft).detach(), size), normalization).M.detach()
            ms = sim(align(fs, size), normalization).M
            terms.append(ad.mean(ad.square(ad.sub(ms, mt))))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(terms))


def kd_soft_loss(Y_s, Y_t, temperature=4.0):
    """Cross-entropy of temperature-softened student against softened teacher,
    averaged over pixels (and batch). Inputs are probability maps (..., k+1, h, w)."""
    Y_s, Y_t = ad.as_tensor(Y_s), ad.as_tensor(Y_t)
    if Y_s.shape != Y_t.shape:
        raise DimensionError(f"kd_soft_loss: {Y_s.shape} vs {Y_t.shape}")
    T = float(temperature)
    axis = -3
    log_s = ad.log_softmax_axis(ad.scale(ad.log(ad.clamp_min(Y_s, EPS)), 1.0 / T), axis)
    zt = np.log(np.maximum(Y_t.data, EPS)) / T
    zt = zt - zt.max(axis=axis, keepdims=True)
    q = np.exp(zt)
    q /= q.sum(axis=axis, keepdims=True)
    ce = ad.sum(ad.mul(log_s, Tensor(q)), axis=axis)
    return ad.scale(ad.mean(ce), -1.0)


def dump_similarity_map(M, path):
    """Write one (hw, hw) map as binary PGM, linearly rescaled to [0, 255]."""
    a = np.asarray(M.M.data if isinstance(M, SimilarityMap) else getattr(M, "data", M), dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"dump_similarity_map expects a single (hw, hw) map, got {a.shape}")
    lo, hi = a.min(), a.max()
    scaled = (a - lo) * (255.0 / (hi - lo)) if hi > lo else np.zeros_like(a)
    write_pnm(path, scaled)
