import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcg_hinf import autodiff as ad
from pcg_hinf.autodiff import Tensor
from pcg_hinf.model import HInfCnnLstm, ModelConfig
from pcg_hinf.pipeline import ClipSet
from pcg_hinf.training import (AdamState, ConfusionCounts, PwlConfig, SaptConfig, ThresholdScheduler,
                               TrainConfig, TrainingError, adam_step, bce_loss, compute_metrics,
                               confusion_counts, f1_at, fni_fpi, penalty_factor, pwl_loss, sapt_update,
                               train)

T = lambda *v: Tensor(np.array(v, dtype=np.float64), requires_grad=True)  # noqa: E731


# --- losses ----------------------------------------------------------------

def test_bce_examples():
    assert float(bce_loss(T(0.5, 0.5), [1, 0]).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(bce_loss(T(1.0, 0.0), [1, 0]).data) <= 1e-6
    assert float(bce_loss(T(0.9, 0.2), [1, 0]).data) == pytest.approx(0.164252, abs=1e-6)


def test_bce_errors():
    with pytest.raises(ValueError, match="empty"):
        bce_loss(Tensor(np.zeros(0)), [])
    with pytest.raises(ValueError, match="0 or 1"):
        bce_loss(T(0.5), [2])


def test_fni_fpi_examples():
    assert fni_fpi(np.array([0.2, 0.9, 0.6]), [1, 0, 1], 0.5) == (1, 1)
    assert fni_fpi(np.array([0.9, 0.1]), [1, 0], 0.5) == (0, 0)
    # both comparisons inclusive
    assert fni_fpi(np.array([0.5, 0.5]), [1, 0], 0.5) == (1, 1)


def test_pwl_examples():
    cfg = PwlConfig(alpha=0.87)
    p = T(0.9, 0.1)
    assert float(pwl_loss(p, [1, 0], cfg, 0.5).data) == float(bce_loss(p, [1, 0]).data)
    assert penalty_factor(1, 1, 0.87) == pytest.approx(2.0, abs=1e-12)
    assert penalty_factor(2, 0, 0.87) * 0.693147 == pytest.approx(1.899223, abs=1e-6)
    q = T(0.3, 0.4, 0.5, 0.5)  # two false negatives at 0.5 plus balanced BCE
    y = [1, 1, 1, 0]
    r = penalty_factor(*fni_fpi(q, y, 0.45), 0.87)
    assert r == pytest.approx(1 + 0.87 * 2 + 0.13 * 1)
    np.testing.assert_allclose(float(pwl_loss(q, y, cfg, 0.45).data),
                               r * float(bce_loss(q, y).data), rtol=1e-15)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40),
       delta=st.floats(0.0, 1.0), alpha=st.floats(0.01, 0.99))
def test_pwl_is_scaled_bce(seed, n, delta, alpha):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.001, 0.999, n)
    y = rng.integers(0, 2, n)
    fni, fpi = fni_fpi(p, y, delta)
    r = penalty_factor(fni, fpi, alpha)
    assert r >= 1 and (r == 1) == (fni == fpi == 0)

    a, b = Tensor(p.copy(), requires_grad=True), Tensor(p.copy(), requires_grad=True)
    pwl = pwl_loss(a, y, PwlConfig(alpha=alpha), delta)
    bce = bce_loss(b, y)
    np.testing.assert_allclose(float(pwl.data), r * float(bce.data), rtol=1e-14)
    ad.backward(pwl)
    ad.backward(bce)
    np.testing.assert_allclose(a.grad, r * b.grad, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0.01, 0.99))
def test_penalty_monotone(seed, alpha):
    rng = np.random.default_rng(seed)
    p = list(rng.uniform(0, 1, 10))
    y = list(rng.integers(0, 2, 10))
    base = penalty_factor(*fni_fpi(np.array(p), y, 0.5), alpha)
    fn = penalty_factor(*fni_fpi(np.array(p + [0.1]), y + [1], 0.5), alpha)
    fp = penalty_factor(*fni_fpi(np.array(p + [0.9]), y + [0], 0.5), alpha)
    assert fn - base == pytest.approx(alpha, abs=1e-12)
    assert fp - base == pytest.approx(1 - alpha, abs=1e-12)


# --- metrics -----------------------------------------------------------------

def test_metric_examples():
    m = compute_metrics(ConfusionCounts(tp=2, fp=1, fn=1, tn=6))
    assert (m.sensitivity, m.precision, m.f1) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
    assert (m.specificity, m.accuracy) == pytest.approx((6 / 7, 0.8))
    m = compute_metrics(ConfusionCounts(3, 0, 0, 5))
    assert m.to_dict() == {k: 1.0 for k in m.to_dict()}
    m = compute_metrics(ConfusionCounts(0, 0, 3, 7))
    assert (m.sensitivity, m.f1, m.specificity, m.accuracy) == (0.0, 0.0, 1.0, 0.7)
    with pytest.raises(ValueError):
        compute_metrics(ConfusionCounts(0, 0, 0, 0))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 50), tau=st.floats(0, 1))
def test_balanced_accuracy_identity(seed, n, tau):
    rng = np.random.default_rng(seed)
    scores = rng.uniform(0, 1, 2 * n)
    labels = np.r_[np.zeros(n), np.ones(n)].astype(int)
    c = confusion_counts(scores, labels, tau)
    assert c.total == 2 * n
    m = compute_metrics(c)
    assert m.accuracy == pytest.approx((m.sensitivity + m.specificity) / 2, abs=1e-12)
    assert m.sensitivity == c.tp / n


# --- SAPT --------------------------------------------------------------------

def test_sapt_argmax_and_tie_break():
    s = ThresholdScheduler(candidate_grid=(0.3, 0.5, 0.7))
    s.smoothed_f1 = {0.3: 0.9, 0.5: 0.8, 0.7: 0.6}
    assert s.best_candidate() == 0.3
    s.smoothed_f1 = {0.3: 0.8, 0.5: 0.9, 0.7: 0.9}
    assert s.best_candidate() == 0.5


def test_sapt_ewma():
    s = ThresholdScheduler(candidate_grid=(0.5,), beta_ewma=0.3)
    s.smoothed_f1[0.5] = 0.5
    sapt_update(s, [0.9, 0.1], [1, 0], epoch=1)
    assert s.smoothed_f1[0.5] == pytest.approx(0.65, abs=1e-12)
    fresh = ThresholdScheduler(candidate_grid=(0.5,))
    sapt_update(fresh, [0.9, 0.1], [1, 0], epoch=1)
    assert fresh.smoothed_f1[0.5] == 1.0  # first update sets directly


def test_sapt_single_class_rejected():
    with pytest.raises(ValueError, match="single class"):
        sapt_update(ThresholdScheduler(), [0.2, 0.3], [0, 0], 1)


def _gaussian_scores(rng, n=250):
    neg = np.clip(rng.normal(0.25, 0.12, n), 0, 1)
    pos = np.clip(rng.normal(0.55, 0.12, n), 0, 1)
    return np.r_[neg, pos], np.r_[np.zeros(n), np.ones(n)].astype(int)


@pytest.mark.parametrize("seed", range(5))
def test_sapt_gaussian_oracle(seed):
    rng = np.random.default_rng(seed)
    s = ThresholdScheduler()
    taus = []
    last = None
    for epoch in range(1, 31):
        last = _gaussian_scores(rng)
        sapt_update(s, *last, epoch)
        taus.append(s.current_tau)
    # exhaustive scan of the grid on pooled draws from the same distribution
    pool = [_gaussian_scores(np.random.default_rng(1000 + k), 2000) for k in range(3)]
    scores = np.concatenate([p[0] for p in pool])
    labels = np.concatenate([p[1] for p in pool])
    best = max(s.candidate_grid, key=lambda t: (f1_at(scores, labels, t), -t))
    assert abs(s.current_tau - best) <= 0.05 + 1e-12
    assert s.current_tau in s.candidate_grid
    changes = [e for e in range(2, 31) if taus[e - 1] != taus[e - 2]]
    assert all(e % 10 == 0 for e in changes)
    assert [e for e, _ in s.history] == [10, 20, 30]


def test_sapt_subsample_is_seeded():
    rng = np.random.default_rng(0)
    runs = []
    for _ in range(2):
        s = ThresholdScheduler(subsample_fraction=0.5, seed=3)
        for epoch in range(1, 11):
            sapt_update(s, *_gaussian_scores(np.random.default_rng(epoch)), epoch)
        runs.append(dict(s.smoothed_f1))
    assert runs[0] == runs[1]
    del rng


# --- Adam --------------------------------------------------------------------

def test_adam_examples():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    p["w"].grad = np.array([1.0])
    adam_step(p, AdamState(lr=1e-3))
    assert p["w"].data[0] == pytest.approx(0.999, abs=1e-9)

    p["w"].grad = np.zeros(1)
    before = p["w"].data.copy()
    adam_step(p, AdamState())
    np.testing.assert_array_equal(p["w"].data, before)

    frozen = {"a": Tensor(np.ones(3), requires_grad=True), "b": Tensor(np.ones(3), requires_grad=True)}
    for t in frozen.values():
        t.grad = np.ones(3)
    adam_step(frozen, AdamState(), trainable=["b"])
    np.testing.assert_array_equal(frozen["a"].data, 1.0)
    assert np.all(frozen["b"].data < 1)


def test_adam_lr_zero_identity(rng):
    p = {"w": Tensor(rng.standard_normal((3, 4)), requires_grad=True)}
    before = p["w"].data.copy()
    st_ = AdamState(lr=0.0)
    for _ in range(5):
        p["w"].grad = rng.standard_normal((3, 4))
        adam_step(p, st_)
    np.testing.assert_array_equal(p["w"].data, before)
    assert st_.step == 5


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.ones(3), requires_grad=True)}
    p["w"].grad = np.ones(4)
    with pytest.raises(ValueError, match="shape"):
        adam_step(p, AdamState())


# --- orchestration -------------------------------------------------------------

TOY = ModelConfig(conv_blocks=(4, 8), hidden_size=8, n_mels=8, n_frames=12)


def toy_clips(n, seed, shift=1.5):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.standard_normal((n, 8, 12)).astype(np.float32) + (shift * y)[:, None, None].astype(np.float32)
    recs = [f"r{seed}_{i // 2:03d}" for i in range(n)]
    return ClipSet(X, y, recs, [r.split("_")[0] + r[-1] for r in recs])


def _run(epochs=2, **kw):
    model = HInfCnnLstm(TOY, seed=0)
    data = {"train": toy_clips(32, 1), "val": toy_clips(16, 2), "test": toy_clips(16, 3)}
    cfg = TrainConfig(epochs=epochs, batch_size=8, lr=1e-2, **kw)
    return model, train(model, data, cfg, PwlConfig(), SaptConfig(gamma_interval=1), seed=0)


def test_two_epoch_smoke():
    _, rep = _run()
    assert [r["epoch"] for r in rep.rows] == [1, 2]
    losses = [r["train_loss"] for r in rep.rows]
    smoothed = [losses[0]]
    for v in losses[1:]:
        smoothed.append(0.3 * v + 0.7 * smoothed[-1])
    assert all(b <= a for a, b in zip(smoothed, smoothed[1:]))
    assert rep.test_clip is not None and rep.test_recording is not None
    assert rep.final_tau in SaptConfig().scheduler().candidate_grid or rep.final_tau == 0.5


def test_training_is_deterministic():
    m1, a = _run()
    m2, b = _run()
    assert a.rows == b.rows and a.final_tau == b.final_tau
    for n in m1.params:
        assert m1.params[n].data.tobytes() == m2.params[n].data.tobytes()


def test_fixed_threshold_bce():
    _, rep = _run(loss="bce", threshold="fixed", fixed_tau=0.4)
    assert all(r["tau"] == 0.4 for r in rep.rows) and rep.final_tau == 0.4


def test_frozen_params_untouched():
    model = HInfCnnLstm(TOY, seed=0)
    model.forward(toy_clips(8, 0).X, train=True)  # running statistics, as a checkpoint would carry
    model.freeze([n for n in model.params if HInfCnnLstm.is_conv(n)])
    before = {n: model.params[n].data.tobytes() for n in model.frozen}
    data = {"train": toy_clips(16, 1), "val": toy_clips(8, 2)}
    rep = train(model, data, TrainConfig(epochs=1, batch_size=8), seed=0)
    assert rep.frozen == sorted(before)
    assert all(model.params[n].data.tobytes() == b for n, b in before.items())


def test_empty_sets_rejected():
    model = HInfCnnLstm(TOY, seed=0)
    with pytest.raises(TrainingError, match="training set"):
        train(model, {"train": toy_clips(0, 1), "val": toy_clips(4, 2)})
    with pytest.raises(TrainingError, match="validation"):
        train(model, {"train": toy_clips(4, 1)})


def test_nan_aborts_with_location():
    model = HInfCnnLstm(TOY, seed=0)
    model.params["head.bias"].data[...] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(model, {"train": toy_clips(8, 1), "val": toy_clips(4, 2)}, TrainConfig(epochs=1))
