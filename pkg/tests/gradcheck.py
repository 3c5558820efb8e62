"""Central-difference gradient checks in float64."""
import numpy as np

from phototransfer.tensor import Tensor


def numeric_grad(f, arrays, index, eps=1e-6):
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(*arrays)
        x[i] = old - eps
        lo = f(*arrays)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_gradients(build, arrays, eps=1e-6, directions=None, rng=None):
    """Max relative error between analytic and numeric gradients.

    ``build`` maps tensors to a scalar tensor; every array gets a gradient.
    With ``directions=k`` each array is probed along k random unit
    directions instead of coordinate by coordinate.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        return float(build(*[Tensor(a, dtype=np.float64) for a in arrs]).data)

    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*tensors)
    out.backward()
    worst = 0.0
    if directions:
        rng = rng or np.random.default_rng(0)
        for _ in range(directions):
            vs = [rng.normal(size=a.shape) for a in arrays]
            vs = [v / np.linalg.norm(v) for v in vs]
            hi = value(*[a + eps * v for a, v in zip(arrays, vs)])
            lo = value(*[a - eps * v for a, v in zip(arrays, vs)])
            num = (hi - lo) / (2 * eps)
            ana = sum(float(np.sum(t.grad * v)) for t, v in zip(tensors, vs) if t.grad is not None)
            worst = max(worst, abs(ana - num) / max(abs(num), abs(ana), 1e-12))
        return worst
    for k, t in enumerate(tensors):
        num = numeric_grad(value, arrays, k, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        err = np.linalg.norm(ana - num) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        worst = max(worst, err)
    return worst


# --- cases: seed -> (build, arrays); every tensor within 4x4x8x8 ----------------

from phototransfer.tensor import (bce_with_logits_loss, concat_channels, conv2d, l1_loss, leaky_relu,
                                  upsample2x_nearest, weighted_sum)
from phototransfer.unet import UNetConfig, UNetModel, _layer_specs


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _conv_case(stride, padding, k, shape, oc, bias=True):
    def make(rng):
        n, c, h, w = shape
        x = rng.normal(size=shape)
        kern = rng.normal(size=(oc, c, k, k))
        arrays = [x, kern] + ([rng.normal(size=oc)] if bias else [])
        oh = (h + 2 * padding - k) // stride + 1
        ow = (w + 2 * padding - k) // stride + 1
        weights = rng.normal(size=(n, oc, oh, ow))

        def build(x, kern, b=None):
            return weighted_sum(conv2d(x, kern, b, stride=stride, padding=padding), weights)
        return build, arrays
    return make


def _leaky(rng):
    w = rng.normal(size=(2, 3, 4, 4))
    return (lambda x: weighted_sum(leaky_relu(x, 0.2), w)), [_away_from_zero(rng, (2, 3, 4, 4))]


def _upsample(rng):
    w = rng.normal(size=(2, 2, 8, 8))
    return (lambda x: weighted_sum(upsample2x_nearest(x), w)), [rng.normal(size=(2, 2, 4, 4))]


def _concat(rng):
    w = rng.normal(size=(1, 4, 4, 4))
    return (lambda a, b: weighted_sum(concat_channels(a, b), w)), [rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 3, 4, 4))]


def _l1(rng):
    t = rng.normal(size=(2, 3, 4, 4))
    p = t + _away_from_zero(rng, t.shape)
    return l1_loss, [p, t]


def _bce(rng):
    t = rng.uniform(0, 1, size=(2, 1, 4, 4))
    t[0, 0, :2] = np.round(t[0, 0, :2])
    return (lambda x: bce_with_logits_loss(x, Tensor(t, dtype=np.float64))), [3 * rng.normal(size=t.shape)]


def _chain(rng):
    """conv/2 -> leaky -> conv -> upsample -> concat skip -> 1x1 conv -> L1."""
    x = rng.normal(size=(1, 2, 8, 8))
    k1 = rng.normal(size=(2, 2, 3, 3)) * 0.5
    k2 = rng.normal(size=(2, 2, 3, 3)) * 0.5
    k3 = rng.normal(size=(2, 4, 1, 1))
    target = rng.normal(size=(1, 2, 8, 8)) * 5

    def build(x, k1, k2, k3):
        h = leaky_relu(conv2d(x, k1, stride=2, padding=1))
        h = upsample2x_nearest(conv2d(h, k2, padding=1))
        return l1_loss(conv2d(concat_channels(h, x), k3), Tensor(target, dtype=np.float64))
    return build, [x, k1, k2, k3]


def _unet(rng):
    """Whole U-Net (depth 2, base 1) w.r.t. input and every parameter."""
    cfg = UNetConfig(in_channels=2, out_channels=1, base_channels=1, depth=2)
    names, arrays = [], [rng.normal(size=(1, 2, 8, 8))]
    for name, cin, cout, k in _layer_specs(cfg):
        names += [f"{name}.weight", f"{name}.bias"]
        arrays += [rng.normal(size=(cout, cin, k, k)) * np.sqrt(2 / (cin * k * k)), 0.1 * rng.normal(size=cout)]
    w = rng.normal(size=(1, 1, 8, 8))

    def build(x, *params):
        return weighted_sum(UNetModel(cfg, dict(zip(names, params))).forward(x), w)
    return build, arrays


OP_CASES = {
    "conv3x3_s1_p1": _conv_case(1, 1, 3, (2, 3, 6, 6), 4),
    "conv3x3_s2_p1": _conv_case(2, 1, 3, (2, 3, 8, 8), 4),
    "conv3x3_s1_p0": _conv_case(1, 0, 3, (1, 2, 7, 7), 3, bias=False),
    "conv1x1": _conv_case(1, 0, 1, (2, 4, 5, 5), 2),
    "leaky_relu": _leaky,
    "upsample2x": _upsample,
    "concat": _concat,
    "l1_loss": _l1,
    "bce_with_logits": _bce,
    "chain": _chain,
    "unet": _unet,
}

# composite networks are probed along random directions; coordinates would take minutes
DIRECTIONAL = {"unet": 4}
GRADCHECK_SEEDS = range(20)
GRADCHECK_TOL = 1e-3


def run_case(name, seed):
    build, arrays = OP_CASES[name](np.random.default_rng(seed))
    for a in arrays:
        assert a.ndim <= 4 and all(s <= lim for s, lim in zip(a.shape[::-1], (8, 8, 4, 4)))
    if name in DIRECTIONAL:
        return check_gradients(build, arrays, directions=DIRECTIONAL[name], rng=np.random.default_rng(seed))
    return check_gradients(build, arrays)
