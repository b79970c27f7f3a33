"""Smoke tests for the python extension module."""

import math

import numpy as np
import pytest

import advkit


def test_version():
    assert advkit.__version__


def test_synth_digits_shapes_and_determinism():
    xa, ya = advkit.synth_digits(64, seed=9)
    xb, yb = advkit.synth_digits(64, seed=9)
    assert xa.shape == (64, 1, 28, 28)
    assert xa.dtype == np.float32
    assert np.array_equal(xa, xb)
    assert ya == yb
    assert xa.min() >= 0.0 and xa.max() <= 1.0
    assert set(ya) <= set(range(10))


def test_pnil_unit_noise_statistics():
    # w = 0, b = 0: the layer adds standard normal noise per feature
    x = np.zeros((32, 1, 28, 28), dtype=np.float32)
    w = np.zeros((1, 28, 28), dtype=np.float32)
    b = np.zeros((1, 28, 28), dtype=np.float32)
    x_out, sigma = advkit.pnil_forward(x, w, b, seed=5)
    assert np.allclose(sigma, 0.0)
    std = float((x_out - x).std())
    assert 0.97 < std < 1.03
    # same seed reproduces; different seed differs
    x_again, _ = advkit.pnil_forward(x, w, b, seed=5)
    assert np.array_equal(x_out, x_again)
    x_other, _ = advkit.pnil_forward(x, w, b, seed=6)
    assert not np.array_equal(x_out, x_other)


def test_model_predict_and_checkpoint(tmp_path):
    model = advkit.build_small_cnn([1, 28, 28], num_classes=10, pnil=True, seed=3)
    assert model.has_pnil
    assert model.param_count == 160 + 4640 + 15690 + 2 * 784
    x, y = advkit.synth_digits(8, seed=2)
    preds = model.predict(x, seed=1)
    assert len(preds) == 8
    path = str(tmp_path / "model.ckpt")
    model.save(path)
    other = advkit.build_small_cnn([1, 28, 28], num_classes=10, pnil=True, seed=99)
    other.load(path)
    assert other.predict(x, seed=1) == preds
    params = model.parameters()
    assert params["pnil.w"].shape == (1, 28, 28)


def test_attack_budget_and_determinism():
    model = advkit.build_small_cnn(
        [1, 28, 28], num_classes=10, pnil=True, seed=7, conv1_channels=4, conv2_channels=6
    )
    x, y = advkit.synth_digits(16, seed=4)
    eps = 8.0 / 255.0
    out = advkit.run_attack(model, x, y, kind="pgd", eps=eps, seed=11, steps=5, eot_L=2)
    delta = out["delta"]
    assert np.abs(delta).max() <= eps + 1e-6
    assert out["x_adv"].min() >= 0.0 and out["x_adv"].max() <= 1.0
    again = advkit.run_attack(model, x, y, kind="pgd", eps=eps, seed=11, steps=5, eot_L=2)
    assert np.array_equal(out["x_adv"], again["x_adv"])
    # the training attack may use up to twice the budget
    nf = advkit.run_attack(model, x, y, kind="nfgsm", eps=eps, seed=11)
    assert np.abs(nf["delta"]).max() <= 2 * eps + 1e-6


def test_ttest_matches_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    diffs = [0.8, 1.9, -0.4, 2.5, 1.1, 0.3, 1.7, -0.2]
    for ratio in (1.0, 0.5, 2.0):
        res = advkit.corrected_resampled_ttest(diffs, ratio=ratio, alpha=0.003)
        n = len(diffs)
        mean = np.mean(diffs)
        var = np.var(diffs, ddof=1)
        t = mean / math.sqrt((1.0 / n + ratio) * var)
        p = 2.0 * scipy_stats.t.sf(abs(t), df=n - 1)
        assert abs(res["t"] - t) < 1e-12
        assert abs(res["p"] - p) < 1e-10
    # plain paired t-test is the ratio -> 0 limit; scipy cross-checks the CDF
    assert abs(advkit.student_t_cdf(1.7, 9) - scipy_stats.t.cdf(1.7, 9)) < 1e-12


def test_cyclical_lr():
    assert advkit.cyclical_lr(0, 0.001, 0.01, 100) == pytest.approx(0.001)
    assert advkit.cyclical_lr(50, 0.001, 0.01, 100) == pytest.approx(0.01)
    assert advkit.cyclical_lr(25, 0.001, 0.01, 100) == pytest.approx(0.0055)


def test_training_and_evaluation_loop():
    x, y = advkit.synth_digits(300, seed=21)
    xv, yv = advkit.synth_digits(100, seed=22)
    model = advkit.build_small_cnn([1, 28, 28], num_classes=10, pnil=False, seed=1,
                                   conv1_channels=4, conv2_channels=6)
    log = advkit.adversarial_train(model, x, list(y), xv, list(yv),
                                   attack="nfgsm", eps=8 / 255, epochs=2,
                                   batch_size=50, lr_lo=1e-3, lr_hi=8e-3, seed=3)
    assert len(log) == 2
    assert log[1]["clean_val_acc"] > 30.0  # learned something
    report = advkit.evaluate_robustness(model, xv, list(yv), eps=8 / 255,
                                        pgd_steps=5, eot_L=1, spsa_subset=20,
                                        spsa_steps=3, spsa_samples=16, seed=5)
    assert "clean" in report and "pgd" in report and "spsa" in report
    assert report["min"] <= report["pgd"] + 1e-9
    assert report["min"] <= report["spsa"] + 1e-9


def test_gradcheck_small():
    out = advkit.gradcheck(networks=8, seed=123)
    assert out["ok"]
    assert out["networks"] == 8
    assert out["max_rel_err"] < 1e-4
