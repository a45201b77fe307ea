import dataclasses
import json
import math

import numpy as np
import pytest

from scunetpp import data as D
from scunetpp import tensor as T
from scunetpp.gradcheck import MICRO_CONFIG, check_function
from scunetpp.model import Model
from scunetpp.tensor import DimensionError, GradientStateError, Tensor
from scunetpp.trainer import Adam, TrainConfig, evaluate, predict, seg_loss, train


@pytest.fixture(scope="module")
def tiny_set():
    return D.phantom_dataset(D.PhantomParams(img_size=32, seed=5), 4)


# -- loss ----------------------------------------------------------------------


def test_uniform_logits_give_ln2_cross_entropy():
    mask = np.zeros((1, 4, 4), dtype=bool)
    mask[:, :2] = True
    loss = seg_loss(Tensor(np.zeros((1, 2, 4, 4))), mask, ce_weight=1.0, dice_weight=0.0)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_saturated_logits_give_small_loss():
    mask = np.random.default_rng(0).random((2, 8, 8)) < 0.4
    # channel 1 is +20 on the mask and -20 off it; channel 0 the reverse
    logits = np.stack([np.where(mask, -20.0, 20.0), np.where(mask, 20.0, -20.0)], axis=1)
    assert seg_loss(Tensor(logits), mask).item() < 0.01


def test_loss_is_non_negative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mask = rng.random((2, 4, 4)) < 0.5
        assert seg_loss(Tensor(rng.normal(0, 3, (2, 2, 4, 4))), mask).item() >= 0.0


def test_loss_gradient():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        mask = rng.random((2, 4, 4)) < 0.4
        x = Tensor(rng.uniform(-2, 2, (2, 2, 4, 4)))
        assert check_function(lambda z: seg_loss(z, mask).reshape(1), [x], rng) < 1e-4


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        seg_loss(Tensor(np.zeros((1, 2, 4, 4))), np.zeros((1, 4, 5), dtype=bool))


def test_deep_supervision_loss_averages_heads():
    rng = np.random.default_rng(2)
    mask = rng.random((1, 4, 4)) < 0.5
    a, b = Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 2, 4, 4)))
    both = seg_loss((a, [b]), mask).item()
    assert both == pytest.approx((seg_loss(a, mask).item() + seg_loss(b, mask).item()) / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(ce_weight=0.6, dice_weight=0.6).validate()


# -- Adam ----------------------------------------------------------------------


def test_adam_first_step_is_minus_lr():
    p = Tensor([0.5], requires_grad=True)
    opt = Adam({"p": p}, lr=1e-4)
    p.grad = np.array([1.0])
    opt.step()
    # bias-corrected moments are exactly g and g^2 at t=1
    assert p.data[0] - 0.5 == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-9)
    assert opt.t == 1


def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-2)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0]) and opt.t == 1


def test_adam_missing_grad():
    opt = Adam({"p": Tensor([1.0], requires_grad=True)})
    with pytest.raises(GradientStateError):
        opt.step()


def test_adam_state_round_trip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-2)
    p.grad = np.array([1.0, 2.0, 3.0])
    opt.step()
    state = opt.state_dict()
    other = Adam({"p": Tensor(np.ones(3), requires_grad=True)})
    other.load_state_dict(state)
    assert other.t == 1 and np.array_equal(other.m["p"], opt.m["p"]) and np.array_equal(other.v["p"], opt.v["p"])
    assert other.m["p"].shape == p.shape


def test_adam_trajectories_identical():
    def run():
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        opt = Adam({"p": p}, lr=1e-2)
        for _ in range(5):
            p.grad = None
            (T.gelu(p) * p).sum().backward()
            opt.step()
        return p.data

    assert run().tobytes() == run().tobytes()


# -- loop ----------------------------------------------------------------------


def test_one_epoch_smoke(tiny_set, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=2, lr=1e-3)
    model, history = train(MICRO_CONFIG, cfg, tiny_set, tiny_set, tmp_path)
    assert len(history) == 1
    row = history[0]
    assert set(row) == {"epoch", "train_loss", "val_dsc", "val_hd95"}
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == row
    for name in ("best.ckp1", "best.json", "last.ckp1", "last.opt.ckp1", "last.state.json"):
        assert (tmp_path / name).exists()


def test_empty_split(tiny_set):
    with pytest.raises(ValueError):
        train(MICRO_CONFIG, TrainConfig(epochs=1), tiny_set.subset([]))
    with pytest.raises(ValueError):
        evaluate(Model(MICRO_CONFIG), tiny_set.subset([]))


def test_resume_is_bitwise(tiny_set, tmp_path):
    cfg = TrainConfig(epochs=4, batch_size=2, lr=1e-3, checkpoint_interval=2)
    _, full = train(MICRO_CONFIG, cfg, tiny_set, tiny_set, tmp_path / "full")
    train(MICRO_CONFIG, dataclasses.replace(cfg, epochs=2), tiny_set, tiny_set, tmp_path / "part")
    _, resumed = train(MICRO_CONFIG, cfg, tiny_set, tiny_set, tmp_path / "part", resume=True)
    assert resumed == full
    assert (tmp_path / "full" / "history.jsonl").read_bytes() == (tmp_path / "part" / "history.jsonl").read_bytes()
    assert (tmp_path / "full" / "last.ckp1").read_bytes() == (tmp_path / "part" / "last.ckp1").read_bytes()


def test_all_background_head_scores_zero(tiny_set):
    model = Model(MICRO_CONFIG)
    model.head.weight.data[:] = 0.0
    model.head.bias.data = np.array([10.0, -10.0])
    report = evaluate(model, tiny_set)
    assert len(report) == len(tiny_set)
    assert report.dsc == [0.0] * len(tiny_set)
    assert report.n_hd_undefined == len(tiny_set)
    assert not predict(model, tiny_set.images).any()
