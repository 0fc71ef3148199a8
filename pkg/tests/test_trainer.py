import csv
import json

import numpy as np
import pytest

from femix.oracle import finite_diff
from femix.tasks import ArgmaxTaskConfig, gen_argmax_task
from femix.trainer import (
    AdamW,
    FemMixer,
    SoftmaxMixer,
    TrainConfig,
    TrainingDiverged,
    build_model,
    ci_preset,
    load_train_config,
    mse_loss,
    train_config_from_dict,
    train_toy,
)

SMALL = ArgmaxTaskConfig(T=16, D=32, n_val=64)


def small_train(**kw):
    base = dict(steps=20, batch=16, heads=4, eval_every=10, eval_batch=64, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("tag", ["fem", "softmax"])
def test_model_gradients_match_finite_differences(tag):
    model = build_model(tag, 8, 2, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    for k, p in model.params.items():
        p += rng.normal(0, 0.5, p.shape)
    X = rng.normal(size=(3, 5, 8))
    target = rng.normal(size=(3, 8))
    y, cache = model.forward(X)
    _, dy = mse_loss(y, target)
    grads = model.backward(dy, cache)
    for name, g in grads.items():
        orig = model.params[name].copy()

        def f(a, name=name):
            model.params[name] = a
            return mse_loss(model.forward(X)[0], target)[0]

        num = finite_diff(f, orig, richardson=True)
        model.params[name] = orig
        assert np.max(np.abs(num - g)) <= 1e-7 * max(1.0, np.max(np.abs(num))), name


def test_mse_loss_gradient():
    y = np.array([[1.0, 2.0]])
    loss, dy = mse_loss(y, np.zeros((1, 2)))
    assert loss == pytest.approx(2.5)
    np.testing.assert_allclose(dy, [[1.0, 2.0]])


def test_outputs_are_convex_reads_at_init():
    X = next(gen_argmax_task(SMALL, 4)).V
    for model in (SoftmaxMixer(32, 4, dtype=np.float64), FemMixer(32, 4, dtype=np.float64)):
        y = model.predict(X)
        assert np.all(y <= X.max(axis=1) + 1e-12)
        assert np.all(y >= X.min(axis=1) - 1e-12)


def test_parameter_counts():
    fem, sm = FemMixer(32, 4), SoftmaxMixer(32, 4)
    assert fem.linear_param_count() == sm.linear_param_count() == 2 * 32 * 32
    assert fem.param_count() - sm.param_count() == 2 * 32
    with pytest.raises(ValueError):
        SoftmaxMixer(30, 4)


def test_adamw_first_step_and_decay():
    opt = AdamW(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    p = {"w": np.array([1.0, -1.0])}
    opt.step(p, {"w": np.array([0.5, -2.0])})
    np.testing.assert_allclose(p["w"], [0.9, -0.9], atol=1e-6)
    opt = AdamW(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.5)
    p = {"w": np.array([2.0])}
    opt.step(p, {"w": np.array([0.0])})
    np.testing.assert_allclose(p["w"], [2.0 * (1 - 0.1 * 0.5)])


def test_zero_steps_is_chance_or_below():
    for tag in ("fem", "softmax"):
        res = train_toy(tag, SMALL, small_train(steps=0))
        assert len(res.history) == 1 and res.history[0]["step"] == 0
        # an untrained convex read sits near the noise bulk, so it rarely lands on the winner
        assert res.final_index_accuracy <= 2.0 / SMALL.T


def test_training_is_bit_reproducible():
    a = train_toy("fem", SMALL, small_train(dtype="float32"))
    b = train_toy("fem", SMALL, small_train(dtype="float32"))
    assert a.step_losses == b.step_losses
    for k in a.mixer.params:
        np.testing.assert_array_equal(a.mixer.params[k], b.mixer.params[k])


def test_fem_loss_decreases_in_50_step_blocks():
    task = ArgmaxTaskConfig(T=32, D=64, n_val=64)
    res = train_toy("fem", task, small_train(steps=300, batch=32, eval_every=300, dtype="float32"))
    blocks = np.asarray(res.step_losses).reshape(-1, 50).mean(axis=1)
    assert np.all(np.diff(blocks) < 0), blocks


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    res = train_toy("softmax", SMALL, small_train(), csv_path=path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["step", "train_mse", "val_mse", "index_accuracy"]
    assert [int(r["step"]) for r in rows] == [0, 10, 20]
    assert float(rows[-1]["index_accuracy"]) == pytest.approx(res.final_index_accuracy)
    assert "history" not in res.summary() and "step_losses" not in res.summary()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard():
    task = ArgmaxTaskConfig(T=8, D=8, delta=1e200, sigma=0.0, n_val=8)
    with pytest.raises(TrainingDiverged):
        train_toy("softmax", task, small_train(steps=3, heads=2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(model="rnn")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(dtype="float16")


def test_ci_preset():
    task, train = ci_preset()
    assert (task.T, task.D, train.steps) == (64, 128, 500)


def test_flat_config(tmp_path):
    task, train, models = train_config_from_dict({"preset": "ci", "steps": 7, "sigma": 0.1, "models": "fem"}, seed=5)
    assert (task.T, task.sigma, task.seed, train.steps, train.seed, models) == (64, 0.1, 5, 7, 5, ["fem"])
    with pytest.raises(ValueError):
        train_config_from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        train_config_from_dict({"models": ["rnn"]})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "T": 32}))
    task, train, models = load_train_config(path)
    assert task.T == 32 and task.seed == train.seed == 3 and models == ["fem", "softmax"]
