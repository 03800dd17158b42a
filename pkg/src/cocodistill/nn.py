"""Toy encoder-decoder networks with named feature-map taps."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ROLES = ("teacher", "student", "discriminator", "paraphraser")


class SpecError(ValueError):
    pass


@dataclass
class NetworkSpec:
    role: str
    widths: list
    in_channels: int = 3
    num_classes: int = 2
    taps: list = field(default_factory=list)
    depth: int = 1  # convs per encoder stage (segmentation nets)
    kernel: int = 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class TapPair:
    """A (shallow, deep) layer pair; teacher names default to the student's."""

    shallow: str
    deep: str
    teacher_shallow: str | None = None
    teacher_deep: str | None = None

    @property
    def student(self):
        return (self.shallow, self.deep)

    @property
    def teacher(self):
        return (self.teacher_shallow or self.shallow, self.teacher_deep or self.deep)


@dataclass
class NetOutput:
    logits: Tensor | None
    probs: Tensor | None
    taps: dict


def default_taps(n_stages):
    return [f"enc{n_stages - 1}", "dec0"]


class Network:
    def __init__(self, spec, seed):
        self.spec = spec
        self.seed = int(seed)
        self.params = OrderedDict()
        self._conv_meta = OrderedDict()
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        self._flop_log = None
        getattr(self, f"_build_{spec.role}")()
        del self._rng
        self._check_taps()

    # ----------------------------------------------------------- construction

    def _add_conv(self, name, ci, co, k, stride=1, pad=None, bias=True, transposed=False):
        fan_in = ci * k * k
        shape = (ci, co, k, k) if transposed else (co, ci, k, k)
        w = self._rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        if bias:
            self.params[f"{name}.bias"] = Tensor(np.zeros(co), requires_grad=True, name=f"{name}.bias")
        self._conv_meta[name] = dict(k=k, ci=ci, co=co, stride=stride, pad=k // 2 if pad is None else pad,
                                     bias=bias, transposed=transposed)

    def _seg_layout(self):
        s = self.spec
        if not s.widths or any(w < 1 for w in s.widths):
            raise SpecError("widths must be a nonempty list of positive channel counts")
        if s.depth < 1:
            raise SpecError("depth must be >= 1")
        n = len(s.widths)
        for i, w in enumerate(s.widths):
            ci = s.in_channels if i == 0 else s.widths[i - 1]
            self._add_conv(f"enc{i}.0", ci, w, 3, stride=1 if i == 0 else 2)
            for d in range(1, s.depth):
                self._add_conv(f"enc{i}.{d}", w, w, 3)
        for i in range(n - 2, -1, -1):
            self._add_conv(f"dec{i}", s.widths[i + 1], s.widths[i], 3)
        self._add_conv("head", s.widths[0], s.num_classes, 1)
        if not s.taps:
            s.taps = default_taps(n)
        self.available_taps = [f"enc{i}" for i in range(n)] + [f"dec{i}" for i in range(n - 2, -1, -1)]

    _build_teacher = _seg_layout
    _build_student = _seg_layout

    def _build_discriminator(self):
        s = self.spec
        ci = s.in_channels
        for i, w in enumerate(s.widths):
            self._add_conv(f"disc{i}", ci, w, 3, stride=2)
            ci = w
        self._add_conv("score", ci, 1, 1)
        self.available_taps = []
        if s.taps:
            raise SpecError("discriminator exposes no taps")

    def _build_paraphraser(self):
        s = self.spec
        if len(s.widths) < 1:
            raise SpecError("paraphraser needs encoder widths")
        ci = s.in_channels
        for i, w in enumerate(s.widths):
            self._add_conv(f"pm_enc{i}", ci, w, s.kernel)
            ci = w
        outs = list(reversed(s.widths[:-1])) + [s.in_channels]
        for i, w in enumerate(outs):
            self._add_conv(f"pm_dec{i}", ci, w, s.kernel, transposed=True)
            ci = w
        self.available_taps = ["code"]
        if not s.taps:
            s.taps = ["code"]

    def _check_taps(self):
        for t in self.spec.taps:
            if t not in self.available_taps:
                raise SpecError(f"tap {t!r} does not resolve to a layer of {self.spec.role}; "
                                f"available: {self.available_taps}")

    # ----------------------------------------------------------- forward

    def _conv(self, name, x):
        m = self._conv_meta[name]
        w = self.params[f"{name}.weight"]
        b = self.params.get(f"{name}.bias")
        if m["transposed"]:
            y = ad.conv_transpose2d(x, w, b, m["stride"], m["pad"])
        else:
            y = ad.conv2d(x, w, b, m["stride"], m["pad"])
        if self._flop_log is not None:
            hw = y.shape[-2] * y.shape[-1]
            if m["transposed"]:
                hw = x.shape[-2] * x.shape[-1]
            flops = conv_flops(m["k"], m["ci"], m["co"], hw, m["bias"])
            if m["transposed"] and m["bias"]:
                # bias still lands once per output element
                flops += (y.shape[-2] * y.shape[-1] - hw) * m["co"]
            self._flop_log.append(flops)
        return y

    def forward(self, x):
        x = ad.as_tensor(x)
        if x.ndim not in (3, 4):
            raise ad.DimensionError(f"expected (c, h, w) or (n, c, h, w) input, got {x.shape}")
        c = x.shape[-3]
        if c != self.spec.in_channels:
            raise ad.DimensionError(f"{self.spec.role} expects {self.spec.in_channels} input channels, got {c}")
        return getattr(self, f"_forward_{self.spec.role}")(x)

    def _forward_seg(self, x):
        s = self.spec
        n = len(s.widths)
        feats = {}
        h = x
        skips = []
        for i in range(n):
            for d in range(s.depth):
                h = ad.relu(self._conv(f"enc{i}.{d}", h))
            feats[f"enc{i}"] = h
            skips.append(h)
        for i in range(n - 2, -1, -1):
            h = ad.relu(self._conv(f"dec{i}", h))
            h = ad.pool_resize(h, skips[i].shape[-2:])
            h = ad.add(h, skips[i])
            feats[f"dec{i}"] = h
        logits = self._conv("head", h)
        axis = -3
        probs = ad.softmax_axis(logits, axis)
        return NetOutput(logits, probs, {t: feats[t] for t in s.taps})

    _forward_teacher = _forward_seg
    _forward_student = _forward_seg

    def _forward_discriminator(self, x):
        h = x
        for i in range(len(self.spec.widths)):
            h = ad.relu(self._conv(f"disc{i}", h))
        score = self._conv("score", h)
        axes = tuple(range(score.ndim - 3, score.ndim))
        return NetOutput(None, ad.mean(score, axis=axes), {})

    def _forward_paraphraser(self, x, decode=True):
        h = x
        for i in range(len(self.spec.widths)):
            h = ad.relu(self._conv(f"pm_enc{i}", h))
        code = h
        if not decode:
            return NetOutput(None, None, {"code": code})
        n_dec = len(self.spec.widths)
        for i in range(n_dec):
            h = self._conv(f"pm_dec{i}", h)
            if i < n_dec - 1:
                h = ad.relu(h)
        return NetOutput(None, h, {"code": code})

    def encode(self, x):
        """Paraphraser encoder only."""
        return self._forward_paraphraser(ad.as_tensor(x), decode=False).taps["code"]

    # ----------------------------------------------------------- utilities

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        ad.zero_grad(self.parameters())

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise SpecError(f"state keys differ: missing {set(self.params) - set(state)}, "
                            f"unexpected {set(state) - set(self.params)}")
        for k, v in state.items():
            if tuple(v.shape) != self.params[k].shape:
                raise SpecError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def total_stride(self):
        if self.spec.role in ("teacher", "student"):
            return 2 ** (len(self.spec.widths) - 1)
        if self.spec.role == "discriminator":
            return 2 ** len(self.spec.widths)
        return 1

    def tap_shapes(self, h, w):
        """Declared (c, h, w) of every tap for an input of spatial size (h, w)."""
        s = self.spec
        if s.role == "paraphraser":
            return {"code": (s.widths[-1], h, w)}
        out = {}
        for i, c in enumerate(s.widths):
            out[f"enc{i}"] = (c, h >> i, w >> i)
        for i in range(len(s.widths) - 2, -1, -1):
            out[f"dec{i}"] = (s.widths[i], h >> i, w >> i)
        return {t: out[t] for t in s.taps}


def build_network(spec, seed):
    if spec.role not in ROLES:
        raise SpecError(f"unknown role {spec.role!r}")
    return Network(spec, seed)


def forward_with_taps(net, x):
    out = net.forward(x)
    h, w = ad.as_tensor(x).shape[-2:]
    declared = net.tap_shapes(h, w)
    for name, t in out.taps.items():
        if t.shape[-3:] != declared[name]:
            raise ad.DimensionError(f"tap {name}: captured {t.shape[-3:]} != declared {declared[name]}")
    return out.probs, out.taps


def conv_params(k, c_in, c_out, bias=True):
    return k * k * c_in * c_out + (c_out if bias else 0)


def conv_flops(k, c_in, c_out, positions, bias=True):
    """2*k^2*c_in*c_out multiply-adds per output position, plus one add per biased output."""
    return 2 * k * k * c_in * c_out * positions + (positions * c_out if bias else 0)


def count_params(net):
    return int(sum(p.data.size for p in net.params.values()))


def count_flops(net, input_shape):
    """Conv FLOPs only: 2*k^2*c_in*c_out*h_out*w_out plus h_out*w_out*c_out for a bias.

    Transposed convs count over their input grid. Pooling, activations and
    elementwise ops are excluded.
    """
    net._flop_log = []
    try:
        net.forward(np.zeros(tuple(input_shape)))
        return int(sum(net._flop_log))
    finally:
        net._flop_log = None


def check_tap_pair(teacher, student, pair, h, w):
    """Bind teacher taps to student taps by spatial size; raise if they disagree."""
    ts = teacher.tap_shapes(h, w)
    ss = student.tap_shapes(h, w)
    for t_name, s_name in zip(pair.teacher, pair.student):
        if t_name not in ts or s_name not in ss:
            raise SpecError(f"tap pair {pair} names a tap not declared on teacher/student")
        if ts[t_name][1:] != ss[s_name][1:]:
            raise SpecError(f"teacher tap {t_name} {ts[t_name][1:]} and student tap {s_name} "
                            f"{ss[s_name][1:]} differ in spatial size")
