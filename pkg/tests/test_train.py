"""Training-loop tests: loss, schedule, optimizer, metric, and the seeded
end-to-end loop (short runs; the full-budget run lives in the acceptance
suite)."""

import math
import re

import numpy as np
import pytest

from cgrseg.data import ToySample
from cgrseg.model import ModelConfig, init_model_params, named_tensors
from cgrseg.tensor import Rng, Tensor
from cgrseg.train import (
    DivergenceError,
    TrainConfig,
    attention_focus_ratio,
    cross_entropy,
    evaluate_miou,
    held_out_samples,
    miou,
    poly_lr,
    predict_mask,
    sgd_step,
    train_toy,
)

from helpers import fd_check, rt

TINY = dict(num_classes=3, stage_channels=(3, 4, 5, 6), head_width=8,
            input_size=(64, 64))


# ------------------------------------------------------------ cross entropy


def test_cross_entropy_uniform_logits():
    logits = Tensor.zeros(2, 4, 3, 3)
    mask = np.zeros((2, 3, 3), dtype=np.int64)
    loss = cross_entropy(logits, mask)
    assert abs(loss.item() - math.log(4)) <= 1e-12


def test_cross_entropy_saturated_correct_class():
    mask = (np.arange(12) % 3).reshape(1, 3, 4).astype(np.int64)
    z = np.zeros((1, 3, 3, 4))
    for c in range(3):
        z[0, c][mask[0] == c] = 30.0
    loss = cross_entropy(Tensor(z, copy=False), mask)
    assert loss.item() < 1e-9


def test_cross_entropy_shift_invariance():
    rng = Rng(1)
    z = rt(rng, (2, 4, 3, 3))
    mask = (rng.uniform((2, 3, 3), 0, 4)).astype(np.int64)
    a = cross_entropy(z, mask).item()
    b = cross_entropy(Tensor(z.data + 123.0), mask).item()
    assert abs(a - b) <= 1e-9


def test_cross_entropy_gradient():
    rng = Rng(2)
    z = rt(rng, (2, 3, 4, 4))
    mask = (rng.uniform((2, 4, 4), 0, 3)).astype(np.int64)
    fd_check(lambda: cross_entropy(z, mask), [z])


def test_cross_entropy_accepts_unbatched_mask():
    z = rt(Rng(3), (1, 3, 4, 4))
    mask = (Rng(4).uniform((4, 4), 0, 3)).astype(np.int64)
    a = cross_entropy(z, mask).item()
    b = cross_entropy(z, mask[None]).item()
    assert a == b


def test_cross_entropy_validation():
    z = rt(Rng(5), (1, 3, 4, 4))
    good = np.zeros((1, 4, 4), dtype=np.int64)
    with pytest.raises(ValueError):
        cross_entropy(z, np.zeros((2, 4, 4), dtype=np.int64))
    with pytest.raises(ValueError):
        cross_entropy(z, good.astype(np.float64))
    with pytest.raises(ValueError):
        cross_entropy(z, good + 3)
    with pytest.raises(ValueError):
        cross_entropy(z, good - 1)


# ---------------------------------------------------------------- schedule


def test_poly_lr_endpoints_and_shape():
    assert poly_lr(0.1, 0, 100, 1.0) == 0.1
    assert poly_lr(0.1, 100, 100, 1.0) == 0.0
    assert abs(poly_lr(0.1, 50, 100, 1.0) - 0.05) <= 1e-15
    assert abs(poly_lr(0.1, 50, 100, 2.0) - 0.025) <= 1e-15
    assert poly_lr(0.1, 200, 100, 1.0) == 0.0  # clamped past the end
    with pytest.raises(ValueError):
        poly_lr(0.1, 0, 0, 1.0)


# --------------------------------------------------------------- optimizer


def _leaf(value):
    t = Tensor(np.array([[[[value]]]]))
    return t


def test_sgd_plain_gradient_descent():
    t = _leaf(2.0)
    t.grad = np.array([[[[0.5]]]])
    state = {"w": np.zeros_like(t.data)}
    sgd_step([("w", t)], state, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert abs(t.data[0, 0, 0, 0] - 1.95) <= 1e-15


def test_sgd_momentum_and_decay_hand_trace():
    # v <- m*v + g + wd*theta; theta <- theta - lr*v, two steps by hand
    t = _leaf(1.0)
    state = {"w": np.zeros_like(t.data)}
    t.grad = np.array([[[[0.5]]]])
    sgd_step([("w", t)], state, lr=0.1, momentum=0.9, weight_decay=0.1)
    assert abs(t.data[0, 0, 0, 0] - 0.94) <= 1e-12  # v=0.6
    t.grad = np.array([[[[0.5]]]])
    sgd_step([("w", t)], state, lr=0.1, momentum=0.9, weight_decay=0.1)
    # v = 0.9*0.6 + 0.5 + 0.1*0.94 = 1.134; theta = 0.94 - 0.1134
    assert abs(t.data[0, 0, 0, 0] - 0.8266) <= 1e-12


def test_sgd_requires_gradients():
    t = _leaf(1.0)
    with pytest.raises(ValueError):
        sgd_step([("w", t)], {"w": np.zeros_like(t.data)}, 0.1, 0.9, 0.0)


# ------------------------------------------------------------------- miou


def test_miou_identical_masks():
    m = (Rng(6).uniform((8, 8), 0, 3)).astype(np.int64)
    ious, mean = miou(m, m, 3)
    assert mean == 1.0
    assert all(v == 1.0 for v in ious if v is not None)


def test_miou_hand_counted():
    pred = np.array([[0, 1], [1, 1]])
    true = np.array([[0, 0], [1, 1]])
    ious, mean = miou(pred, true, 2)
    assert ious == [0.5, 2 / 3]
    assert abs(mean - (0.5 + 2 / 3) / 2) <= 1e-15


def test_miou_absent_class_excluded():
    pred = np.array([[0, 1], [1, 1]])
    true = np.array([[0, 0], [1, 1]])
    ious, mean = miou(pred, true, 4)
    assert ious[2] is None and ious[3] is None
    assert abs(mean - (0.5 + 2 / 3) / 2) <= 1e-15


def test_miou_disjoint_predictions():
    pred = np.ones((4, 4), dtype=np.int64)
    true = np.zeros((4, 4), dtype=np.int64)
    ious, mean = miou(pred, true, 2)
    assert ious == [0.0, 0.0] and mean == 0.0


def test_miou_shape_mismatch():
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2), dtype=np.int64), np.zeros((3, 3), dtype=np.int64), 2)


# ------------------------------------------------------------- config


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(eval_interval=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ------------------------------------------------------------ the loop


def test_zero_steps_returns_untouched_init():
    mcfg = ModelConfig(**TINY)
    tcfg = TrainConfig(steps=0, seed=9)
    params, lines = train_toy(tcfg, mcfg)
    assert lines == []
    ref = init_model_params(Rng(9).spawn(1), mcfg)
    got = {n: t.data for n, _, t in named_tensors(params)}
    want = {n: t.data for n, _, t in named_tensors(ref)}
    assert got.keys() == want.keys()
    for n in got:
        assert np.array_equal(got[n], want[n]), n


def test_short_run_is_reproducible_and_well_formed():
    mcfg = ModelConfig(**TINY)
    tcfg = TrainConfig(steps=4, batch_size=2, seed=5, eval_interval=2,
                       eval_samples=2)
    p1, l1 = train_toy(tcfg, mcfg)
    p2, l2 = train_toy(tcfg, mcfg)
    assert l1 == l2
    w1 = {n: t.data for n, _, t in named_tensors(p1)}
    w2 = {n: t.data for n, _, t in named_tensors(p2)}
    for n in w1:
        assert np.array_equal(w1[n], w2[n]), n

    pat = re.compile(
        r"^step=(\d+) lr=[0-9.eE+-]+ loss=[0-9.eE+-]+( miou=[01]\.\d{6})?$"
    )
    assert len(l1) == 4
    for i, line in enumerate(l1):
        m = pat.match(line)
        assert m, line
        assert int(m.group(1)) == i
        has_eval = (i + 1) % 2 == 0 or i + 1 == 4
        assert (m.group(2) is not None) == has_eval, line


def test_loss_decreases_over_a_short_run():
    mcfg = ModelConfig(**TINY)
    params, lines = train_toy(TrainConfig(steps=30, batch_size=2, seed=1,
                                          eval_interval=30, eval_samples=2),
                              mcfg)
    losses = [float(line.split("loss=")[1].split()[0]) for line in lines]
    assert abs(losses[0] - math.log(3)) <= 1e-6  # zero classifier at init
    assert min(losses[5:]) < losses[0]


@pytest.mark.parametrize("variant", ["add", "mul"])
def test_both_attention_variants_train(variant):
    mcfg = ModelConfig(rca_variant=variant, **TINY)
    params, lines = train_toy(TrainConfig(steps=3, batch_size=2, seed=2,
                                          eval_interval=10, eval_samples=2),
                              mcfg)
    losses = [float(line.split("loss=")[1].split()[0]) for line in lines]
    assert all(math.isfinite(v) for v in losses)


def test_divergence_raises_with_step():
    mcfg = ModelConfig(**TINY)
    tcfg = TrainConfig(steps=40, batch_size=2, lr=1e9, seed=0,
                       eval_interval=100, eval_samples=2)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as err:
            train_toy(tcfg, mcfg)
    assert 0 <= err.value.step < 40


# ------------------------------------------------------------- evaluation


def test_held_out_samples_deterministic():
    mcfg = ModelConfig(**TINY)
    a = held_out_samples(mcfg, 3, 4)
    b = held_out_samples(mcfg, 3, 4)
    assert len(a) == len(b) == 4
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image.data, sb.image.data)
        assert np.array_equal(sa.mask, sb.mask)
        assert sa.image.dims == (1, 3, 64, 64)


def test_predict_and_evaluate_shapes():
    mcfg = ModelConfig(**TINY)
    params = init_model_params(Rng(1), mcfg)
    samples = held_out_samples(mcfg, 1, 2)
    pred = predict_mask(samples[0].image, params, mcfg)
    assert pred.shape == (64, 64)
    score = evaluate_miou(params, mcfg, samples)
    assert 0.0 <= score <= 1.0


def test_attention_focus_ratio_runs_and_validates():
    mcfg = ModelConfig(**TINY)
    params = init_model_params(Rng(2), mcfg)
    samples = held_out_samples(mcfg, 2, 2)
    r = attention_focus_ratio(params, mcfg, samples, stage="sfr.8")
    assert math.isfinite(r) and r > 0
    empty = ToySample(image=samples[0].image,
                      mask=np.zeros((64, 64), dtype=np.int64))
    with pytest.raises(ValueError):
        attention_focus_ratio(params, mcfg, [empty])
