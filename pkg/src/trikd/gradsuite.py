"""Registry of finite-difference checks for every differentiable op and loss.

Each entry maps a name to a builder ``seed -> list of (argument, f, x0)``
where ``f`` is a scalar function of the argument under test.  Non-scalar ops
are reduced with a fixed random projection so every output coordinate
contributes to the gradient.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import losses
from .autodiff import Tensor, fft2, fftshift, grad_check, ifft2, ops
from .decoder import HIGH, LOW, FreqChannelGate, spectral_scores, gaussian_filter

TOL = 1e-5
Case = Tuple[str, Callable[[Tensor], Tensor], np.ndarray]
REGISTRY: Dict[str, Callable[[int], List[Case]]] = {}


def register(name: str):
    def deco(fn):
        REGISTRY[name] = fn
        return fn
    return deco


def _proj(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=shape)
    return lambda t: ops.sum(ops.mul(t, w))


def _unary(op, shape, low=-2.0, high=2.0):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(low, high, size=shape)
        proj = _proj(rng, np.shape(op(Tensor(x)).data))
        return [("x", lambda t: proj(op(t)), x)]
    return build


def _binary(op, sa, sb, low=-2.0, high=2.0):
    def build(seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(low, high, size=sa), rng.uniform(low, high, size=sb)
        proj = _proj(rng, np.shape(op(Tensor(a), Tensor(b)).data))
        return [("a", lambda t: proj(op(t, Tensor(b))), a),
                ("b", lambda t: proj(op(Tensor(a), t)), b)]
    return build


def _away_from_zero(shape, rng, low=0.2, high=2.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# elementwise -----------------------------------------------------------------
register("add")(_binary(ops.add, (3, 4), (4,)))
register("sub")(_binary(ops.sub, (3, 4), (3, 1)))
register("mul")(_binary(ops.mul, (2, 3, 4), (3, 4)))
register("neg")(_unary(ops.neg, (3, 4)))
register("square")(_unary(ops.square, (3, 4)))
register("exp")(_unary(ops.exp, (3, 4)))
register("log")(_unary(ops.log, (3, 4), 0.3, 3.0))
register("sqrt")(_unary(ops.sqrt, (3, 4), 0.3, 3.0))
register("sigmoid")(_unary(ops.sigmoid, (3, 4), -4.0, 4.0))


@register("div")
def _div(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 2, size=(3, 4)), _away_from_zero((3, 4), rng, 0.5)
    proj = _proj(rng, (3, 4))
    return [("a", lambda t: proj(ops.div(t, Tensor(b))), a), ("b", lambda t: proj(ops.div(Tensor(a), t)), b)]


@register("relu")
def _relu(seed):
    rng = np.random.default_rng(seed)
    x = _away_from_zero((3, 4), rng, 0.05)
    proj = _proj(rng, (3, 4))
    return [("x", lambda t: proj(ops.relu(t)), x)]


# reductions and shape --------------------------------------------------------
register("sum")(_unary(lambda t: ops.sum(t, axis=1, keepdims=True), (3, 4, 2)))
register("mean")(_unary(lambda t: ops.mean(t, axis=(0, 2)), (3, 4, 2)))
register("reshape")(_unary(lambda t: ops.reshape(t, (4, 6)), (2, 3, 4)))
register("transpose")(_unary(lambda t: ops.transpose(t, (2, 0, 1)), (2, 3, 4)))
register("getitem")(_unary(lambda t: ops.getitem(t, (slice(None), [0, 2, 2], slice(1, 3))), (2, 3, 4)))
register("roll")(_unary(lambda t: ops.roll(t, (1, -2), (1, 2)), (2, 3, 4)))
register("matmul")(_binary(ops.matmul, (2, 3, 4), (4, 5)))


@register("concat")
def _concat(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 2, 4))
    proj = _proj(rng, (2, 5, 4))
    return [("a", lambda t: proj(ops.concat([t, Tensor(b)], axis=1)), a),
            ("b", lambda t: proj(ops.concat([Tensor(a), t], axis=1)), b)]


# normalisation and probability -------------------------------------------------
register("softmax")(_unary(lambda t: ops.softmax(t, axis=1), (2, 4, 3)))


@register("layer_norm")
def _layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    proj = _proj(rng, (3, 5))
    return [("x", lambda t: proj(ops.layer_norm(t, Tensor(w), Tensor(b))), x),
            ("weight", lambda t: proj(ops.layer_norm(Tensor(x), t, Tensor(b))), w),
            ("bias", lambda t: proj(ops.layer_norm(Tensor(x), Tensor(w), t)), b)]


@register("batch_norm")
def _batch_norm(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2), rng.normal(size=2)
    proj = _proj(rng, x.shape)

    def bn(xx, ww, bb):
        return ops.batch_norm(xx, ww, bb, np.zeros(2), np.ones(2), True)
    return [("x", lambda t: proj(bn(t, Tensor(w), Tensor(b))), x),
            ("weight", lambda t: proj(bn(Tensor(x), t, Tensor(b))), w),
            ("bias", lambda t: proj(bn(Tensor(x), Tensor(w), t)), b)]


@register("cross_entropy")
def _cross_entropy(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2, 3, 4, 4))
    y = rng.integers(0, 3, size=(2, 4, 4))
    y[0, 0, :2] = 255
    return [("logits", lambda t: ops.cross_entropy(ops.softmax(t, axis=1), y, 255), z)]


@register("kl_divergence")
def _kl(seed):
    rng = np.random.default_rng(seed)
    zp, zq = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    return [("p", lambda t: ops.kl_divergence(ops.softmax(t, -1), ops.softmax(Tensor(zq), -1)), zp),
            ("q", lambda t: ops.kl_divergence(ops.softmax(Tensor(zp), -1), ops.softmax(t, -1)), zq)]


# convolution, pooling, resampling ----------------------------------------------
@register("conv2d")
def _conv(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    proj = _proj(rng, (2, 3, 3, 3))

    def f(xx, ww, bb):
        return ops.conv2d(xx, ww, bb, stride=2, padding=1)
    return [("x", lambda t: proj(f(t, Tensor(w), Tensor(b))), x),
            ("weight", lambda t: proj(f(Tensor(x), t, Tensor(b))), w),
            ("bias", lambda t: proj(f(Tensor(x), Tensor(w), t)), b)]


@register("conv2d_1x1")
def _conv1(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 1))
    proj = _proj(rng, (2, 2, 4, 4))
    return [("x", lambda t: proj(ops.conv2d(t, Tensor(w))), x),
            ("weight", lambda t: proj(ops.conv2d(Tensor(x), t)), w)]


@register("max_pool2d")
def _maxpool(seed):
    rng = np.random.default_rng(seed)
    # distinct values so the arg-max is unique under perturbation
    x = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1
    proj = _proj(rng, (2, 2, 2, 2))
    return [("x", lambda t: proj(ops.max_pool2d(t, 2)), x.astype(np.float64))]


register("bilinear_upsample")(_unary(lambda t: ops.bilinear_upsample(t, 7, 5), (1, 2, 3, 2)))
register("adaptive_avg_pool2d")(_unary(lambda t: ops.adaptive_avg_pool2d(t, 3), (1, 2, 5, 4)))


@register("mhsa")
def _mhsa(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 4))
    ws = [rng.normal(size=(4, 4)) * 0.5 for _ in range(4)]
    p_out, p_att = _proj(rng, (2, 5, 4)), _proj(rng, (2, 5, 5))

    def f(xx, wts):
        out, att = ops.mhsa(xx, *wts, heads=2)
        return ops.add(p_out(out), p_att(att))
    cases = [("x", lambda t: f(t, [Tensor(w) for w in ws]), x)]
    for k, label in enumerate(("wq", "wk", "wv", "wo")):
        def g(t, k=k):
            wts = [Tensor(w) for w in ws]
            wts[k] = t
            return f(Tensor(x), wts)
        cases.append((label, g, ws[k]))
    return cases


# frequency domain -------------------------------------------------------------
def _complex_proj(rng, shape):
    pr, pi = _proj(rng, shape), _proj(rng, shape)
    return lambda X: ops.add(pr(X.real), pi(X.imag))


@register("fft2")
def _fft2(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 8))
    cp = _complex_proj(rng, (2, 4, 8))
    return [("x", lambda t: cp(fft2(t)), x)]


@register("ifft2")
def _ifft2(seed):
    rng = np.random.default_rng(seed)
    re, im = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
    proj = _proj(rng, (2, 4, 4))

    def spectrum(r, i):
        from .autodiff import ComplexTensor
        return ComplexTensor(r, i)
    return [("real", lambda t: proj(ifft2(spectrum(t, Tensor(im)))), re),
            ("imag", lambda t: proj(ifft2(spectrum(Tensor(re), t))), im)]


@register("fftshift")
def _fftshift(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 6))
    proj = _proj(rng, (2, 4, 6))
    return [("x", lambda t: proj(fftshift(t)), x)]


@register("spectral_magnitude")
def _magnitude(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 8, 8))
    proj = _proj(rng, (1, 2, 8, 8))
    return [("x", lambda t: proj(fftshift(fft2(t)).abs()), x)]


@register("spectral_scores")
def _scores(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    proj = _proj(rng, (2, 3))
    mask = gaussian_filter(HIGH, 2.0, 8, 8).matrix
    return [("x", lambda t: proj(spectral_scores(t, mask)), x)]


@register("freq_channel_gate")
def _gate(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    cases = []
    for kind in (HIGH, LOW):
        gate = FreqChannelGate(3, kind, rng=rng)
        gate.conv.weight.data = rng.normal(size=gate.conv.weight.shape) * 0.3
        gate.conv.bias.data = rng.normal(size=3) * 0.3
        proj = _proj(rng, x.shape)
        cases.append((f"x[{kind}]", lambda t, g=gate, p=proj: p(g(t)), x))
    return cases


# composite losses ------------------------------------------------------------
def _prob_logits(rng, shape):
    return rng.normal(size=shape)


@register("seg_ce")
def _seg(seed):
    rng = np.random.default_rng(seed)
    z = _prob_logits(rng, (2, 4, 6, 6))
    y = rng.integers(0, 4, size=(2, 6, 6))
    return [("logits", lambda t: losses.seg_ce(ops.softmax(t, axis=1), y), z)]


@register("cps")
def _cps(seed):
    rng = np.random.default_rng(seed)
    zs = [_prob_logits(rng, (2, 3, 4, 4)) for _ in range(3)]
    cases = []
    for k, view in enumerate(losses.VIEWS):
        def f(t, k=k):
            ps = [ops.softmax(Tensor(z), axis=1) for z in zs]
            ps[k] = ops.softmax(t, axis=1)
            out = losses.cps_losses(*ps)
            return ops.add(ops.add(out["cnn"], out["vit"]), out["hyb"])
        cases.append((view, f, zs[k]))
    return cases


@register("spatial_loss")
def _spa(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    return [("f_cnn", lambda t: losses.spatial_loss(t, Tensor(b)), a),
            ("f_proj", lambda t: losses.spatial_loss(Tensor(a), t), b)]


@register("attention_loss")
def _att(seed):
    rng = np.random.default_rng(seed)
    zv, zh = rng.normal(size=(2, 16, 16)), rng.normal(size=(2, 4, 4))
    return [("vit", lambda t: losses.attention_loss(ops.softmax(t, -1), ops.softmax(Tensor(zh), -1)), zv),
            ("hybrid", lambda t: losses.attention_loss(ops.softmax(Tensor(zv), -1), ops.softmax(t, -1)), zh)]


@register("total_loss")
def _total(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=4)
    w = losses.LossWeights(0.5, 0.5, 0.1)

    def f(t):
        parts = [ops.square(ops.getitem(t, i)) for i in range(4)]
        return losses.total_loss(*parts, w=w, mode="semi")
    return [("terms", f, x)]


# runner -------------------------------------------------------------------------
def run_op(name: str, seeds=range(10), registry=None) -> float:
    """Worst relative error of ``name`` over all seeds and arguments."""
    registry = REGISTRY if registry is None else registry
    if name not in registry:
        raise KeyError(f"unknown op {name!r}; registered: {', '.join(sorted(registry))}")
    worst = 0.0
    for seed in seeds:
        for _, f, x in registry[name](seed):
            worst = max(worst, grad_check(f, x))
    return worst


def run_all(seeds=range(10), registry=None) -> Dict[str, float]:
    registry = REGISTRY if registry is None else registry
    return {name: run_op(name, seeds, registry) for name in sorted(registry)}
