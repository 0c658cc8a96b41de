import math

import numpy as np
import pytest

from dcvit import numerics as nx
from dcvit.checks import cross_channel_sensitivity
from dcvit.datagen import SynthTask, gen_dataset, split
from dcvit.encoder import ChannelBatch, ConfigError, encode, forward_logits, init_model
from dcvit.numerics import Tensor
from dcvit.training import (
    GRADCHECK_MAX_PARAMS,
    AdamState,
    TrainConfig,
    TrainHistory,
    accuracy,
    adam_step,
    gradcheck,
    loss_and_grads,
    predict,
    train,
)

from conftest import tiny_config


def small_task_data(kind="single_channel", n=120, **kw):
    task = SynthTask(kind=kind, C=3, img_size=8, bar_length=4,
                     informative_channels=[0] if kind == "single_channel" else [0, 1], **kw)
    return split(gen_dataset(task, n), (0.5, 0.5, 0.0))[:2]


def small_model(seed=0, **kw):
    return init_model(tiny_config(img_size=8, patch_size=4, num_classes=2, **kw), seed=seed)


# cross entropy -------------------------------------------------------------------


def test_cross_entropy_uniform():
    assert nx.cross_entropy(Tensor(np.zeros((3, 5))), [0, 4, 2]).data == pytest.approx(math.log(5))


def test_cross_entropy_hand_value():
    assert nx.cross_entropy(Tensor([[1.0, 0.0]]), [0]).data == pytest.approx(0.313262, abs=1e-6)


def test_cross_entropy_confident_limit():
    assert nx.cross_entropy(Tensor([[500.0, 0.0, 0.0]]), [0]).data == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="range"):
        nx.cross_entropy(Tensor(np.zeros((1, 2))), [2])


# Adam ----------------------------------------------------------------------------------


def test_adam_zero_gradient():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), TrainConfig(lr=0.1), 1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_hand_value():
    cfg = TrainConfig(lr=0.01)
    p = {"w": Tensor(np.array(0.5))}
    adam_step(p, {"w": np.array(1.0)}, AdamState(), cfg, 1)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p["w"].data == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_constant_gradient_limit():
    cfg = TrainConfig(lr=0.01)
    p = {"w": Tensor(np.array([0.0, 0.0]))}
    state = AdamState()
    g = np.array([3.0, -0.2])
    for t in range(1, 501):
        before = p["w"].data.copy()
        adam_step(p, {"w": g}, state, cfg, t)
    np.testing.assert_allclose(p["w"].data - before, -cfg.lr * np.sign(g), rtol=1e-6)


def test_adam_errors():
    with pytest.raises(nx.ShapeError):
        adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, AdamState(), TrainConfig(), 1)
    with pytest.raises(ValueError):
        adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(2)}, AdamState(), TrainConfig(), 0)


def test_adam_keeps_float32():
    p = {"w": Tensor(np.zeros(3, dtype=np.float32))}
    adam_step(p, {"w": np.ones(3, dtype=np.float32)}, AdamState(), TrainConfig(), 1)
    assert p["w"].dtype == np.float32


# config / history ----------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError, match="momentum"):
        TrainConfig.from_dict({"momentum": 0.9})
    assert TrainConfig.from_dict({"betas": [0.8, 0.9]}).betas == (0.8, 0.9)


def test_history_jsonl():
    h = TrainHistory([{"step": 1, "train_loss": 0.5, "val_accuracy": 0.25}], {2: 0.1, 3: 0.2})
    lines = h.to_jsonl().splitlines()
    assert lines[0] == '{"step": 1, "train_loss": 0.5, "val_accuracy": 0.25}'
    assert lines[-1] == '{"alpha": {"2": 0.1, "3": 0.2}}'
    assert h.best_accuracy == h.final_accuracy == 0.25


# training loop ---------------------------------------------------------------------------


def test_initial_loss_near_log_k():
    tr, _ = small_task_data(num_classes=2)
    model = init_model(tiny_config(img_size=8, patch_size=4, num_classes=2))
    loss, _ = loss_and_grads(model, tr)
    assert abs(loss - math.log(2)) < 0.1


def test_zero_lr_single_step_leaves_params():
    tr, va = small_task_data()
    model = small_model()
    before = {k: v.data.copy() for k, v in model.params.items()}
    hist = train(model, tr, va, TrainConfig(lr=0.0, steps=1))
    assert len(hist.records) == 1
    for k, v in model.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_training_reproducible():
    tr, va = small_task_data("xor_channels")
    cfg = TrainConfig(steps=6, eval_every=3, batch_size=8)
    h1 = train(small_model(), tr, va, cfg)
    h2 = train(small_model(), tr, va, cfg)
    assert h1 == h2
    assert len(h1.records) == 2


def test_alpha_moves_on_xor():
    tr, va = small_task_data("xor_channels")
    model = small_model(channel_layers=(1, 2))
    start = model.alphas()
    _, grads = loss_and_grads(model, tr)
    assert all(abs(float(grads[f"layers.{m - 1}.alpha"])) > 0 for m in (1, 2))
    hist = train(model, tr, va, TrainConfig(steps=5, eval_every=5, batch_size=8))
    assert set(hist.alphas) == {1, 2}
    assert all(hist.alphas[m] != start[m] for m in (1, 2))
    assert set(hist.records[-1]["alpha"]) == {"1", "2"}


def test_no_alpha_without_M():
    tr, va = small_task_data()
    hist = train(small_model(channel_layers=()), tr, va, TrainConfig(steps=2))
    assert hist.alphas == {}
    assert "alpha" not in hist.records[-1]


def test_training_reduces_loss():
    tr, va = small_task_data(n=200, noise_std=0.1)
    model = small_model(seed=1)
    start, _ = loss_and_grads(model, tr)
    train(model, tr, va, TrainConfig(steps=150, lr=3e-3, batch_size=16, eval_every=150))
    end, _ = loss_and_grads(model, tr)
    assert end < start - 0.1


def test_target_accuracy_stops_early():
    tr, va = small_task_data()
    hist = train(small_model(), tr, va, TrainConfig(steps=50, eval_every=1, target_accuracy=0.0))
    assert [r["step"] for r in hist.records] == [1]


def test_head_too_small_for_task():
    tr, va = small_task_data(num_classes=3)
    with pytest.raises(ConfigError):
        train(small_model(), tr, va, TrainConfig(steps=1))


def test_predict_matches_argmax_and_chunks():
    tr, _ = small_task_data()
    model = small_model()
    want = np.argmax(forward_logits(tr, model).data, axis=1)
    np.testing.assert_array_equal(predict(model, tr, chunk=7), want)
    assert accuracy(model, tr) == float((want == tr.labels).mean())


def test_init_model_without_M_is_channel_local():
    model = init_model(tiny_config(channel_layers=(), use_channel_embed=False), dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 4))

    def f(images):
        return encode(ChannelBatch(images), model).data

    assert cross_channel_sensitivity(f, x, 1, 0, channel_axis=1) <= 1e-8
    assert cross_channel_sensitivity(f, x, 0, 2, channel_axis=1) <= 1e-8


# gradient check --------------------------------------------------------------------------


def test_gradcheck_tiny_passes_with_alpha():
    rep = gradcheck(tiny_config(g_ch="abmil"), seed=0)
    assert rep.passed(1e-3), rep.errors
    assert rep.members["alpha"] == ["layers.1.alpha"]
    assert {"pool_sp", "pool_ch", "attn", "mlp", "head", "patch"} <= set(rep.errors)


def test_gradcheck_without_M_has_empty_alpha_group():
    rep = gradcheck(tiny_config(channel_layers=(), g_sp="mean", g_ch="mean"), seed=1)
    assert rep.members["alpha"] == []
    assert "alpha" not in rep.errors
    assert rep.passed()


def test_gradcheck_rejects_large_models():
    with pytest.raises(ConfigError, match=str(GRADCHECK_MAX_PARAMS)):
        gradcheck(tiny_config(dim=64, heads=2))
