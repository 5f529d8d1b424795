import dataclasses
import json

import pytest
import torch

from twosubnet_tal import training
from twosubnet_tal.harness.config import align_to_dataset, train_preset
from twosubnet_tal.harness.synthetic import generate_synthetic_dataset, preset
from twosubnet_tal.training import DivergenceError, TrainConfig, run_three_step_training


@pytest.fixture(scope="module")
def small_feature():
    return generate_synthetic_dataset(preset("tiny5", num_train=6, num_test=2, frames=320))


@pytest.fixture(scope="module")
def small_pixel():
    return generate_synthetic_dataset(preset("pixel-tiny", num_train=3, num_test=1))


def quick(ds, **kw):
    cfg = align_to_dataset(train_preset(None), ds)
    return dataclasses.replace(cfg, batch_size=16, iterations=(3, 3, 2), **kw)


def test_phase_order(small_feature):
    res = run_three_step_training(small_feature, quick(small_feature))
    phases = [r["phase"] for r in res.history]
    assert phases == ["step1"] * 3 + ["step2"] * 3 + ["step3"] * 2
    assert all(r["principal"] is None for r in res.history[:3])
    assert all(r["auxiliary"] is None for r in res.history[3:6])
    for r in res.history[6:]:
        assert r["total"] == pytest.approx(0.5 * r["auxiliary"] + 0.5 * r["principal"], rel=1e-6)


def test_step3_without_aux(small_feature):
    cfg = quick(small_feature, aux_in_step3=False)
    res = run_three_step_training(small_feature, cfg, phases=("step3",))
    assert all(r["total"] == pytest.approx(r["principal"]) for r in res.history)


def test_step2_freezes_subnet_one(small_pixel):
    cfg = quick(small_pixel)
    res = run_three_step_training(small_pixel, cfg, phases=("step1",))
    model = res.model
    before = {k: v.clone() for k, v in model.subnet1.state_dict().items()}
    s2_before = {k: v.clone() for k, v in model.subnet2.state_dict().items()}
    run_three_step_training(small_pixel, cfg, phases=("step2",), model=model)
    after = model.subnet1.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    changed = [k for k, v in model.subnet2.state_dict().items() if not torch.equal(v, s2_before[k])]
    assert changed


def test_step1_leaves_subnet_two(small_feature):
    cfg = quick(small_feature)
    model = training.build_model(cfg, small_feature.num_classes)
    before = {k: v.clone() for k, v in model.subnet2.state_dict().items()}
    run_three_step_training(small_feature, cfg, phases=("step1",), model=model)
    assert all(torch.equal(before[k], v) for k, v in model.subnet2.state_dict().items())


def test_divergence_names_phase(small_feature, monkeypatch):
    real = training.phase_loss
    calls = {"n": 0}

    def poisoned(model, maps, targets, cfg, phase):
        rep = real(model, maps, targets, cfg, phase)
        if phase == "step2":
            calls["n"] += 1
            if calls["n"] == 2:
                rep.total = float("nan")
        return rep

    monkeypatch.setattr(training, "phase_loss", poisoned)
    with pytest.raises(DivergenceError) as info:
        run_three_step_training(small_feature, quick(small_feature))
    assert info.value.phase == "step2" and info.value.iteration == 1


def test_deterministic(small_feature):
    cfg = quick(small_feature, seed=11)
    a = run_three_step_training(small_feature, cfg).history
    b = run_three_step_training(small_feature, cfg).history
    assert json.dumps(a) == json.dumps(b)


def test_config_round_trip():
    cfg = train_preset("tiny5")
    back = TrainConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg and back.hash() == cfg.hash()
    assert dataclasses.replace(cfg, seed=1).hash() != cfg.hash()


def test_bad_mix():
    with pytest.raises(ValueError):
        TrainConfig(step3_mix=(0.6, 0.6))


@pytest.mark.slow
def test_tiny5_principal_loss_halves(tiny5_run):
    recs = [json.loads(x) for x in tiny5_run.history.read_text().splitlines()]
    principal = [r["principal"] for r in recs if r["principal"] is not None]
    initial = principal[0]
    final = sum(principal[-10:]) / 10
    print(f"principal loss {initial:.4f} -> {final:.4f}")
    assert final <= 0.5 * initial
