import numpy as np
import pytest

from femix.tasks import (
    ArgmaxTaskConfig,
    exact_match,
    gen_argmax_task,
    gen_selective_copy,
    index_accuracy,
)


def first_batch(cfg, n=8, split="train"):
    return next(gen_argmax_task(cfg, n, split=split))


def test_defaults():
    cfg = ArgmaxTaskConfig()
    assert (cfg.T, cfg.D, cfg.delta, cfg.sigma, cfg.n_train, cfg.n_val) == (128, 512, 1.0, 0.05, 200_000, 2_000)


@pytest.mark.parametrize("kw", [dict(delta=0.0), dict(sigma=-0.1), dict(T=0), dict(n_val=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ArgmaxTaskConfig(**kw)


def test_noise_free_batch():
    b = first_batch(ArgmaxTaskConfig(T=10, D=6, sigma=0.0, delta=2.0))
    winners = np.take_along_axis(b.V, b.a[:, None, :], axis=1)[:, 0]
    assert np.all(winners == 2.0)
    assert np.count_nonzero(b.V) == b.a.size
    np.testing.assert_array_equal(b.y_star, 2.0)


def test_targets_are_channel_maxima():
    b = first_batch(ArgmaxTaskConfig(T=16, D=8))
    np.testing.assert_array_equal(b.y_star, b.V.max(axis=1))
    assert b.a.min() >= 0 and b.a.max() < 16


def test_winner_is_max_with_high_probability():
    cfg = ArgmaxTaskConfig(T=128, D=64, n_train=1000)
    hits = total = 0
    for b in gen_argmax_task(cfg, 100):
        winners = np.take_along_axis(b.V, b.a[:, None, :], axis=1)[:, 0]
        hits += int(np.sum(b.y_star == winners))
        total += winners.size
    assert total == 1000 * 64
    assert hits / total >= 0.999


def test_seed_reproducible_and_splits_differ():
    cfg = ArgmaxTaskConfig(T=8, D=4)
    a, b = first_batch(cfg), first_batch(cfg)
    np.testing.assert_array_equal(a.V, b.V)
    assert not np.array_equal(first_batch(cfg, split="val").V, a.V)
    assert not np.array_equal(first_batch(ArgmaxTaskConfig(T=8, D=4, seed=1)).V, a.V)


def test_winners_shared_across_noise_levels():
    a = first_batch(ArgmaxTaskConfig(T=8, D=4, sigma=0.05))
    b = first_batch(ArgmaxTaskConfig(T=8, D=4, sigma=0.2))
    np.testing.assert_array_equal(a.a, b.a)


def test_stream_lengths_and_epochs():
    cfg = ArgmaxTaskConfig(T=4, D=2, n_train=10, n_val=3)
    assert [len(b.a) for b in gen_argmax_task(cfg, 4)] == [4, 4, 2]
    assert [len(b.a) for b in gen_argmax_task(cfg, 4, split="val")] == [3]
    two = list(gen_argmax_task(cfg, 4, epochs=2))
    np.testing.assert_array_equal(two[0].V, two[3].V)
    with pytest.raises(ValueError):
        next(gen_argmax_task(cfg, 4, split="test"))


def test_dtype_is_respected():
    assert first_batch(ArgmaxTaskConfig(T=4, D=2), n=2).V.dtype == np.float64
    assert next(gen_argmax_task(ArgmaxTaskConfig(T=4, D=2), 2, dtype=np.float32)).V.dtype == np.float32


# ---------------------------------------------------------------- accuracy


def test_accuracy_of_exact_targets():
    b = first_batch(ArgmaxTaskConfig(T=32, D=16))
    assert index_accuracy(b.y_star, b.V, b.a) == 1.0


def test_accuracy_of_random_output_is_chance():
    cfg = ArgmaxTaskConfig(T=128, D=512)
    b = first_batch(cfg, n=16)
    # chance means guessing an index: read the entry at a uniformly random position per channel
    guess = np.random.default_rng(0).integers(0, cfg.T, size=b.a.shape)
    y = np.take_along_axis(b.V, guess[:, None, :], axis=1)[:, 0]
    assert abs(index_accuracy(y, b.V, b.a) - 1 / 128) < 0.004


def test_accuracy_of_output_inside_noise_bulk_is_near_zero():
    cfg = ArgmaxTaskConfig(T=128, D=512)
    b = first_batch(cfg, n=16)
    y = np.random.default_rng(0).normal(0.0, cfg.sigma, size=b.y_star.shape)
    assert index_accuracy(y, b.V, b.a) < 1e-3


def test_accuracy_of_wide_random_output_is_not_chance():
    cfg = ArgmaxTaskConfig(T=128, D=512)
    b = first_batch(cfg, n=16)
    y = np.random.default_rng(0).normal(size=b.y_star.shape)
    assert index_accuracy(y, b.V, b.a) > 0.2


def test_accuracy_of_first_row_copy():
    b = first_batch(ArgmaxTaskConfig(T=32, D=64), n=16)
    acc = index_accuracy(b.V[:, 0], b.V, b.a)
    assert acc == pytest.approx(np.mean(b.a == 0), abs=1e-15)
    assert acc < 3 / 32


def test_accuracy_ties_go_to_smallest_index():
    V = np.array([[[1.0], [0.0], [1.0]]])
    assert index_accuracy(np.array([[1.0]]), V, np.array([[0]])) == 1.0
    assert index_accuracy(np.array([[1.0]]), V, np.array([[2]])) == 0.0


def test_accuracy_shape_checks():
    with pytest.raises(ValueError):
        index_accuracy(np.zeros((2, 3)), np.zeros((2, 4, 3)), np.zeros((2, 2), dtype=int))
    assert index_accuracy(np.array([0.0, 1.0]), np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1])) == 1.0


# ---------------------------------------------------------------- selective copy


def test_copy_empty_stream():
    assert list(gen_selective_copy(8, 5, 0)) == []


def test_copy_single_mark():
    item = next(gen_selective_copy(8, 5, 1, n_marked=1, seed=3))
    assert item.marks.sum() == 1
    assert exact_match(item.target, item.tokens[item.marks])
    assert item.target.shape == (1,)


def test_copy_reproducible_and_ordered():
    a = list(gen_selective_copy(12, 7, 5, seed=9))
    b = list(gen_selective_copy(12, 7, 5, seed=9))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.tokens, y.tokens)
        np.testing.assert_array_equal(x.target, x.tokens[np.flatnonzero(x.marks)])
    assert all(x.tokens.max() < 7 for x in a)


def test_copy_validation_and_match():
    with pytest.raises(ValueError):
        next(gen_selective_copy(4, 1, 1))
    with pytest.raises(ValueError):
        next(gen_selective_copy(4, 3, 1, n_marked=5))
    assert not exact_match([1, 2], [1, 2, 3])
    assert not exact_match([1, 2], [1, 3])
