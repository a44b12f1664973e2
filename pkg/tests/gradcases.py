"""Finite-difference fixtures shared by the unit and acceptance suites.

Each case maps a seed to ``(builder, params, tolerance)``. Losses contract
outputs with a fixed random weighting so no gradient is trivially zero.
"""

import numpy as np

from pcg_hinf import autodiff as ad
from pcg_hinf.model import GATES, LstmParams, LstmState, hinf_lstm_step, standard_lstm_step
from pcg_hinf.training.losses import PwlConfig, bce_loss, pwl_loss


def _t(rng, *shape, scale=1.0):
    return ad.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def dense_case(seed):
    rng = np.random.default_rng(seed)
    x, W, b = _t(rng, 4, 5), _t(rng, 5, 3), _t(rng, 3)
    r = ad.Tensor(rng.standard_normal((4, 3)))
    return (lambda: ad.sum_(ad.mul(ad.dense(x, W, b), r))), {"x": x, "W": W, "b": b}, 1e-4


def conv_case(seed):
    rng = np.random.default_rng(seed)
    x, k, b = _t(rng, 1, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    r = ad.Tensor(rng.standard_normal((1, 3, 5, 5)))
    return (lambda: ad.sum_(ad.mul(ad.conv2d_same(x, k, b), r))), {"x": x, "kernels": k, "bias": b}, 1e-4


def batchnorm_case(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _t(rng, 4, 2, 3, 3), _t(rng, 2), _t(rng, 2)
    r = ad.Tensor(rng.standard_normal((4, 2, 3, 3)))

    def build():
        state = ad.BatchNormState.fresh(2, np.float64)
        return ad.sum_(ad.mul(ad.batchnorm2d(x, g, b, state, "train"), r))
    return build, {"x": x, "gamma": g, "beta": b}, 1e-3


def maxpool_case(seed):
    rng = np.random.default_rng(seed)
    # distinct values with gaps much larger than h so no window flips its argmax
    vals = rng.permutation(2 * 2 * 4 * 4).astype(float) * 0.1
    x = ad.Tensor(vals.reshape(2, 2, 4, 4), requires_grad=True)
    r = ad.Tensor(rng.standard_normal((2, 2, 2, 2)))
    return (lambda: ad.sum_(ad.mul(ad.maxpool_2x2(x), r))), {"x": x}, 1e-4


def pointwise_case(seed):
    rng = np.random.default_rng(seed)
    a, b, c = _t(rng, 6), _t(rng, 6), _t(rng, 6)
    pos = ad.Tensor(rng.uniform(0.5, 2.0, 6), requires_grad=True)

    def build():
        s = ad.pointwise("sigmoid", a)
        mix = ad.pointwise("add", ad.pointwise("mul", s, ad.pointwise("tanh", b)),
                           ad.pointwise("mul", ad.pointwise("one_minus", s), c))
        return ad.sum_(ad.pointwise("sub", mix, ad.pointwise("log", pos)))
    return build, {"a": a, "b": b, "c": c, "pos": pos}, 1e-5


def lstm_params(rng, d_in=3, hidden=4, k_size=1):
    arrays = {}
    for g in GATES:
        arrays[f"W_{g}"] = _t(rng, d_in, hidden, scale=0.5)
        arrays[f"U_{g}"] = _t(rng, hidden, hidden, scale=0.5)
        arrays[f"b_{g}"] = _t(rng, hidden, scale=0.1)
    arrays["K_filter"] = _t(rng, k_size)
    return arrays


def _lstm_case(seed, step, steps=3, hidden=4):
    rng = np.random.default_rng(seed)
    params = lstm_params(rng, hidden=hidden)
    xs = [ad.Tensor(rng.standard_normal((2, 3))) for _ in range(steps)]
    r = ad.Tensor(rng.standard_normal((2, hidden)))
    p = LstmParams(**params)

    def build():
        st = LstmState.zeros(2, hidden, np.float64)
        for x in xs:
            st = step(x, st, p)
        return ad.add(ad.sum_(ad.mul(st.h, r)), ad.sum_(st.c))
    if step is hinf_lstm_step:  # forget weights are unused by this cell
        params = {k: v for k, v in params.items() if not k.endswith("_f")}
    else:
        params = {k: v for k, v in params.items() if k != "K_filter"}
    return build, params, 1e-4


def standard_lstm_case(seed):
    return _lstm_case(seed, standard_lstm_step)


def hinf_lstm_case(seed):
    return _lstm_case(seed, hinf_lstm_step)


def _logits(rng, n=8):
    z = rng.standard_normal(n)
    y = np.arange(n) % 2
    return ad.Tensor(z, requires_grad=True), y


def bce_case(seed):
    rng = np.random.default_rng(seed)
    z, y = _logits(rng)
    return (lambda: bce_loss(ad.sigmoid(z), y)), {"z": z}, 1e-4


def pwl_case(seed):
    rng = np.random.default_rng(seed)
    z, y = _logits(rng)
    p = 1 / (1 + np.exp(-z.data))
    # keep delta clear of every score so the piecewise-constant factor is locally fixed
    cands = np.linspace(0.1, 0.9, 81)
    delta = float(cands[np.argmax([np.min(np.abs(p - d)) for d in cands])])
    cfg = PwlConfig()
    return (lambda: pwl_loss(ad.sigmoid(z), y, cfg, delta)), {"z": z}, 1e-4


CASES = {
    "dense": dense_case,
    "conv2d_same": conv_case,
    "batchnorm2d": batchnorm_case,
    "maxpool_2x2": maxpool_case,
    "pointwise": pointwise_case,
    "standard_lstm_step": standard_lstm_case,
    "hinf_lstm_step": hinf_lstm_case,
    "bce_loss": bce_case,
    "pwl_loss": pwl_case,
}


def run_case(name, seed):
    build, params, tol = CASES[name](seed)
    return ad.finite_diff_check(build, params, tolerance=tol)
