import numpy as np
import pytest

from cocodistill import autodiff as ad
from cocodistill.adversarial import AdversarialPair, clip_weights, disc_loss, disc_step, gen_loss, scores
from cocodistill.autodiff import Tensor
from cocodistill.nn import NetworkSpec, build_network
from cocodistill.optim import Adam


def _D(widths=(4,), seed=0):
    return build_network(NetworkSpec("discriminator", list(widths), in_channels=5), seed)


def _constant_D(d):
    D = _D(())
    for k, p in D.params.items():
        p.data[...] = 0.0
    D.params["score.bias"].data[...] = d
    return D


def _batch(rng, n=3, hw=8):
    y = rng.uniform(size=(n, 2, hw, hw))
    y /= y.sum(1, keepdims=True)
    return y, rng.uniform(size=(n, 3, hw, hw))


def test_constant_discriminator(rng):
    D = _constant_D(0.37)
    Yt, X = _batch(rng)
    Ys = Tensor(_batch(rng)[0], requires_grad=True)
    assert disc_loss(D, Yt, Ys, X).item() == 0.0
    with ad.Tape():
        lg = gen_loss(D, Ys, X)
        ad.backward(ad.add(lg, ad.scale(ad.sum(Ys), 0.0)))
    assert lg.item() == pytest.approx(0.37, abs=1e-15)
    assert np.array_equal(Ys.grad, np.zeros_like(Ys.data))


def test_forced_arithmetic(rng, monkeypatch):
    import cocodistill.adversarial as adv

    Yt, X = _batch(rng)
    Ys, _ = _batch(rng)
    # teacher batch scores 0.7 everywhere, student batch 0.2
    monkeypatch.setattr(adv, "scores", lambda D, Y, X: Tensor(np.full(len(Y.data), 0.7 if np.array_equal(Y.data, Yt) else 0.2)))
    assert adv.disc_loss(None, Yt, Ys, X).item() == pytest.approx(0.5, abs=1e-15)


def test_disc_loss_gradient(rng):
    D = _D((3,), 1)
    Yt, X = _batch(rng, 2, 4)
    Ys, _ = _batch(rng, 2, 4)
    assert ad.gradcheck(lambda *ps: disc_loss(D, Yt, Ys, X), D.parameters()) < 1e-4


def test_linear_critic_gradient_into_student(rng):
    # no hidden layers: D = mean over pixels of w . [Y, X] + b
    D = _D(())
    w = rng.normal(size=5)
    D.params["score.weight"].data = w.reshape(1, 5, 1, 1)
    Y, X = _batch(rng, 1, 4)
    Ys = Tensor(Y, requires_grad=True)
    with ad.Tape():
        ad.backward(gen_loss(D, Ys, X))
    want = np.broadcast_to(w[:2, None, None] / 16, (1, 2, 4, 4))
    assert np.allclose(Ys.grad, want, atol=1e-15)
    for p in D.parameters():
        assert p.grad is None


def test_gen_loss_is_mean_of_single_forwards(rng):
    D = _D((4, 4), 3)
    Y, X = _batch(rng, 4, 8)
    singles = [D.forward(np.concatenate([Y[i], X[i]])).probs.item() for i in range(4)]
    assert abs(gen_loss(D, Y, X).item() - np.mean(singles)) < 1e-12


def test_gen_loss_gradient(rng):
    D = _D((3,), 4)
    Y, X = _batch(rng, 2, 4)
    assert ad.gradcheck(lambda y: gen_loss(D, y, X), [Tensor(Y)]) < 1e-4


def test_clip_weights():
    D = _D((4,), 0)
    clip_weights(D, 10.0)
    before = {k: v.copy() for k, v in D.state_dict().items()}
    clip_weights(D, 10.0)
    assert all(np.array_equal(before[k], v) for k, v in D.state_dict().items())
    D.params["score.bias"].data[...] = 0.3
    clip_weights(D, 0.01)
    assert D.params["score.bias"].data.item() == 0.01
    assert max(np.abs(p.data).max() for p in D.parameters()) <= 0.01


def test_clip_bound_holds_after_every_update(rng):
    pair = AdversarialPair(_D((4, 8), 2), clip=0.01)
    opt = Adam(pair.D.parameters(), lr=0.05)
    for _ in range(25):
        Yt, X = _batch(rng, 2, 8)
        Ys, _ = _batch(rng, 2, 8)
        disc_step(pair, Yt, Ys, X, opt)
        assert max(np.abs(p.data).max() for p in pair.D.parameters()) <= 0.01


def test_scores_shape_check(rng):
    with pytest.raises(ad.DimensionError):
        scores(_D(), np.ones((1, 2, 4, 4)), np.ones((1, 3, 8, 8)))
