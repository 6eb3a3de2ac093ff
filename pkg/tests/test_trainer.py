import logging
import os
import re
import shutil

import numpy as np
import pytest

from autograd import Parameter, Tape, Tensor, backward, double_precision, softmax_cross_entropy
from dataio.augment import AugmentParams
from dataio.class_maps import synthetic_class_map
from dataio.loader import Sample, SegmentationDataset
from dataio.synthetic import gen_synthetic
from evaluator import evaluate
from exceptions import CheckpointError, TrainingError
from models import ModelConfig, Module, SegNet, parameter_digest, read_checkpoint, save_checkpoint
from trainer import (
    OptimState,
    ScheduleEvent,
    Stage,
    StagePlan,
    Trainer,
    TrainingLog,
    poly_lr,
    run_stages,
    step,
)

from conftest import TOY_CLASSES


class _Leaf(Module):
    def __init__(self, weight, bias=None):
        super().__init__()
        self.weight = Parameter(np.array(weight, dtype=np.float64), decay=True)
        self.bias = Parameter(np.array(bias, dtype=np.float64)) if bias is not None else None


class _Pair(Module):
    """Two one-parameter layer groups: `rgb` and `head`."""

    def __init__(self, rgb=0.0, head=0.0, bias=None):
        super().__init__()
        self.rgb = _Leaf([rgb])
        self.head = _Leaf([head], bias=[bias] if bias is not None else None)


def _fixed_lr(lr, momentum=0.0, weight_decay=0.0, **kwargs):
    # power 0 keeps the poly factor at exactly one
    return OptimState(base_lr=lr, momentum=momentum, weight_decay=weight_decay, power=0.0, max_iter=1000, **kwargs)


def _samples(count, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Sample(
            rng.uniform(size=(3, size, size)),
            rng.uniform(size=(1, size, size)),
            rng.integers(0, TOY_CLASSES, size=(size, size)),
            name=f"s{i}",
        )
        for i in range(count)
    ]


def _one_stage(epochs, rgb_branch=True, depth_branch=False, events=()):
    return StagePlan((Stage("train-rgb", epochs, rgb_branch=rgb_branch, depth_branch=depth_branch, events=events),))


# ---- learning-rate policy ----

def test_poly_endpoints():
    assert poly_lr(5e-5, 0, 1000, 0.9) == 5e-5
    assert poly_lr(5e-5, 1000, 1000, 0.9) == 0.0


def test_poly_halfway():
    assert poly_lr(5e-5, 500, 1000, 0.9) == pytest.approx(2.6795e-5, rel=1e-4)


def test_poly_is_strictly_decreasing():
    values = [poly_lr(1e-2, i, 50, 0.9) for i in range(51)]
    assert all(a > b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("iter,max_iter", [(-1, 10), (11, 10), (0, 0)])
def test_poly_rejects_out_of_range(iter, max_iter):
    with pytest.raises(TrainingError):
        poly_lr(1e-3, iter, max_iter, 0.9)


# ---- optimizer step ----

def test_vanilla_sgd_step():
    model = _Pair(head=1.0)
    optim = _fixed_lr(0.1)
    step(model, {"rgb.weight": np.array([0.0]), "head.weight": np.array([0.5])}, optim)
    assert model.head.weight.data[0] == pytest.approx(0.95)
    assert optim.iter == 1


def test_momentum_recurrence():
    model = _Pair()
    optim = _fixed_lr(0.1, momentum=0.9)
    grads = {"rgb.weight": np.array([0.0]), "head.weight": np.array([1.0])}
    step(model, grads, optim)
    assert model.head.weight.data[0] == pytest.approx(-0.1)
    step(model, grads, optim)
    assert optim.velocity["head.weight"][0] == pytest.approx(1.9)
    assert model.head.weight.data[0] == pytest.approx(-0.29)


def test_weight_decay_skips_parameters_without_decay():
    model = _Pair(head=2.0, bias=2.0)
    optim = _fixed_lr(0.1, weight_decay=0.5)
    step(model, {"rgb.weight": np.array([0.0]), "head.weight": np.array([0.0]), "head.bias": np.array([0.0])}, optim)
    assert model.head.weight.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert model.head.bias.data[0] == 2.0


def test_group_weight_decay_override():
    model = _Pair(rgb=1.0, head=1.0)
    optim = _fixed_lr(1.0, weight_decay=0.1, group_weight_decay={"head": 0.5})
    step(model, {"rgb.weight": np.array([0.0]), "head.weight": np.array([0.0])}, optim)
    assert model.rgb.weight.data[0] == pytest.approx(0.9)
    assert model.head.weight.data[0] == pytest.approx(0.5)


def test_zero_multiplier_leaves_weights_and_velocity_alone():
    model = _Pair(rgb=3.0, head=1.0)
    optim = _fixed_lr(0.1, momentum=0.9, group_lr_multipliers={"rgb": 0.0, "head": 1.0})
    optim.velocity["rgb.weight"] = np.array([0.25])
    step(model, {"rgb.weight": np.array([7.0]), "head.weight": np.array([1.0])}, optim)
    assert model.rgb.weight.data[0] == 3.0
    assert optim.velocity["rgb.weight"][0] == 0.25
    assert model.rgb.weight.grad is None


def test_frozen_group_is_bitwise_invariant_over_many_steps(tiny_config):
    model = SegNet(tiny_config)
    model.set_frozen("rgb")
    model.set_frozen("depth")
    before = {prefix: parameter_digest(model, prefix) for prefix in ("rgb.", "depth.", "head.")}
    optim = OptimState(base_lr=0.05, max_iter=120)
    rng = np.random.default_rng(0)
    for _ in range(100):
        grads = {path: rng.normal(size=p.shape) for path, p in model.named_parameters()}
        step(model, grads, optim)
    assert parameter_digest(model, "rgb.") == before["rgb."]
    assert parameter_digest(model, "depth.") == before["depth."]
    assert parameter_digest(model, "head.") != before["head."]
    assert optim.iter == 100


def test_missing_gradient_is_an_error():
    with pytest.raises(TrainingError, match="head.weight"):
        step(_Pair(), {"rgb.weight": np.array([1.0])}, _fixed_lr(0.1))


def test_step_budget_is_enforced():
    optim = OptimState(base_lr=0.1, max_iter=1)
    grads = {"rgb.weight": np.array([1.0]), "head.weight": np.array([1.0])}
    model = _Pair()
    step(model, grads, optim)
    with pytest.raises(TrainingError, match="used up"):
        step(model, grads, optim)


def test_step_reads_and_clears_parameter_grads():
    model = _Pair(head=1.0)
    model.rgb.weight.grad = np.array([0.0])
    model.head.weight.grad = np.array([0.5])
    step(model, None, _fixed_lr(0.1))
    assert model.head.weight.data[0] == pytest.approx(0.95)
    assert model.head.weight.grad is None


@pytest.mark.parametrize("seed", range(5))
def test_small_step_decreases_loss(tiny_config, seed):
    rng = np.random.default_rng(seed)
    with double_precision():
        model = SegNet(tiny_config, seed=seed)
        rgb = Tensor(rng.normal(size=(1, 3, 32, 32)))
        depth = Tensor(rng.uniform(size=(1, 1, 32, 32)))
        labels = rng.integers(0, TOY_CLASSES, size=(1, 32, 32))
        with Tape.scope():
            loss = softmax_cross_entropy(model(rgb, depth), labels)
            backward(loss, inputs=model.parameters())
        step(model, None, _fixed_lr(1e-6))
        with Tape.scope():
            after = softmax_cross_entropy(model(rgb, depth), labels)
    assert after.item() < loss.item()


def test_optimizer_state_entries_round_trip():
    optim = OptimState(iter=17, max_iter=40)
    optim.velocity["head.weight"] = np.array([1.5, -2.0], dtype=np.float32)
    entries = optim.state_entries(stage=2, epoch=3)
    assert entries["_state.stage"][0] == 2
    assert entries["_state.max_iter"][0] == 40
    restored = OptimState(max_iter=40)
    restored.restore(entries)
    assert restored.iter == 17
    np.testing.assert_array_equal(restored.velocity["head.weight"], [1.5, -2.0])


# ---- schedule and plans ----

def test_schedule_event_warns_about_literal_values(caplog):
    optim = OptimState()
    event = ScheduleEvent(140, base_lr=5e-4, group_weight_decay=(("head", 0.999),))
    with caplog.at_level(logging.WARNING, logger="trainer"):
        event.apply(optim)
    assert optim.base_lr == 5e-4
    assert optim.decay_for("head") == 0.999
    assert optim.decay_for("rgb") == 0.0005
    assert "rises" in caplog.text
    assert "unusually large" in caplog.text


def test_default_plan():
    plan = StagePlan.default()
    assert [s.name for s in plan.stages] == ["train-rgb", "train-depth", "train-fusion-head"]
    assert [s.epochs for s in plan.stages] == [200, 200, 200]
    rgb, depth, fused = plan.stages
    assert (rgb.rgb_branch, rgb.depth_branch, rgb.jitter) == (True, False, True)
    assert (depth.rgb_branch, depth.depth_branch, depth.jitter) == (False, True, False)
    assert set(fused.frozen) == {"rgb", "depth"}
    assert fused.events[0].epoch == 140
    assert fused.events[0].base_lr == 5e-4


def test_compressed_plan_has_no_events():
    plan = StagePlan.compressed((20, 20, 60))
    assert [s.epochs for s in plan.stages] == [20, 20, 60]
    assert all(not s.events for s in plan.stages)


def test_fused_stage_must_freeze_both_backbones():
    with pytest.raises(TrainingError, match="unfrozen"):
        StagePlan((Stage("fused", 1, frozen=("rgb",)),))
    with pytest.raises(TrainingError):
        StagePlan(())


# ---- training runs ----

def test_one_epoch_logs_one_step_per_sample(tmp_path, tiny_config):
    log_path = tmp_path / "train.log"
    result = run_stages(
        _one_stage(1), tiny_config, _samples(8), optim_defaults=OptimState(base_lr=0.01), log_path=str(log_path)
    )
    iterations, epochs = result.log.frames()
    assert iterations["iter"].tolist() == list(range(1, 9))
    assert len(epochs) == 1
    lines = log_path.read_text(encoding="utf-8").splitlines()
    iteration_lines = [line for line in lines if line.startswith("iter=")]
    assert len(iteration_lines) == 8
    assert all(re.fullmatch(r"iter=\d+ epoch=1 lr=\S+ loss=\S+", line) for line in iteration_lines)
    assert re.fullmatch(r"epoch=1 stage=train-rgb loss=\S+ pixel_acc=\S+ miou=\S+", lines[-1])
    assert result.model.depth is None


def test_training_is_reproducible(tiny_config):
    runs = [
        run_stages(_one_stage(2), tiny_config, _samples(3), seed=5, optim_defaults=OptimState(base_lr=0.01))
        for _ in range(2)
    ]
    assert runs[0].log.iterations[-1]["loss"] == runs[1].log.iterations[-1]["loss"]
    assert parameter_digest(runs[0].model) == parameter_digest(runs[1].model)


def test_schedule_event_changes_the_logged_rate(tiny_config):
    plan = _one_stage(2, events=(ScheduleEvent(2, base_lr=0.02),))
    result = run_stages(plan, tiny_config, _samples(2), optim_defaults=OptimState(base_lr=0.01, power=0.9))
    lrs = [row["lr"] for row in result.log.iterations]
    assert lrs[0] == pytest.approx(0.01)
    assert lrs[2] == pytest.approx(poly_lr(0.02, 2, 4, 0.9))


def test_staged_run_keeps_backbones_frozen(tmp_path, tiny_config):
    dataset = _samples(3)
    kwargs = dict(out_dir=str(tmp_path), optim_defaults=OptimState(base_lr=0.01))
    plan = StagePlan.compressed((1, 1, 2))
    for stage in (1, 2):
        run_stages(plan, tiny_config, dataset, only_stage=stage, **kwargs)
    assert os.path.exists(tmp_path / "stage1.ckpt")
    assert os.path.exists(tmp_path / "stage2.ckpt")
    rgb_stage = read_checkpoint(tmp_path / "stage1.ckpt")
    depth_stage = read_checkpoint(tmp_path / "stage2.ckpt")

    result = run_stages(plan, tiny_config, dataset, only_stage=3, **kwargs)
    final = result.model.state_dict()
    for path, values in rgb_stage.items():
        if path.startswith("rgb."):
            np.testing.assert_array_equal(final[path].data, values)
    for path, values in depth_stage.items():
        if path.startswith("depth."):
            np.testing.assert_array_equal(final[path].data, values)
    assert result.checkpoints == {"stage3": str(tmp_path / "stage3.ckpt")}


def test_full_plan_in_memory(tiny_config):
    trainer = Trainer(tiny_config, _samples(2), optim_defaults=OptimState(base_lr=0.01))
    result = trainer.run(StagePlan.compressed((1, 1, 1)))
    assert set(trainer.models) == {1, 2, 3}
    assert result.model.fusion is not None
    assert parameter_digest(result.model, "rgb.") == parameter_digest(trainer.models[1], "rgb.")
    assert parameter_digest(result.model, "depth.") == parameter_digest(trainer.models[2], "depth.")
    assert len(result.log.iterations) == 6


def test_depth_stage_starts_from_trained_rgb_branch(tiny_config):
    trainer = Trainer(tiny_config, _samples(2), optim_defaults=OptimState(base_lr=0.01))
    plan = StagePlan.compressed((1, 1, 1))
    trainer.run_stage(plan, 1)
    depth_model = trainer.build_stage_model(plan, 2)
    np.testing.assert_array_equal(
        depth_model.depth.res3[0].conv1.weight.data, trainer.models[1].rgb.res3[0].conv1.weight.data
    )


def test_fusion_stage_needs_trained_branches(tmp_path, tiny_config):
    with pytest.raises(CheckpointError, match="rgb"):
        run_stages(StagePlan.compressed((1, 1, 1)), tiny_config, _samples(2), only_stage=3, out_dir=str(tmp_path))


def test_failed_stage_still_closes_the_log_file(tmp_path, tiny_config):
    trainer = Trainer(tiny_config, _samples(2), out_dir=str(tmp_path), log_path=str(tmp_path / "train.log"))
    assert len(trainer.log._lines.handlers) == 1
    with pytest.raises(CheckpointError):
        trainer.run(StagePlan.compressed((1, 1, 1)), only_stage=3)
    assert trainer.log._lines.handlers == []


def test_resume_continues_where_it_stopped(tmp_path, tiny_config):
    dataset = _samples(3)
    plan = _one_stage(2)
    defaults = OptimState(base_lr=0.01)

    full = Trainer(tiny_config, dataset, seed=2, out_dir=str(tmp_path / "full"), optim_defaults=defaults,
                   checkpoint_every=1)
    save = full._save

    def save_and_keep(model, optim, index, epoch):
        save(model, optim, index, epoch)
        if epoch == 1:
            shutil.copy(full.checkpoint_path(index), tmp_path / "epoch1.ckpt")

    full._save = save_and_keep
    uninterrupted = full.run(plan)

    resumed = Trainer(tiny_config, dataset, seed=2, out_dir=str(tmp_path / "resumed"), optim_defaults=defaults)
    result = resumed.run(plan, resume=str(tmp_path / "epoch1.ckpt"))
    assert [row["iter"] for row in result.log.iterations] == [4, 5, 6]
    assert parameter_digest(result.model) == parameter_digest(uninterrupted.model)


def test_resume_needs_trainer_state(tmp_path, tiny_config):
    path = tmp_path / "bare.ckpt"
    save_checkpoint(SegNet(tiny_config.replace(depth_branch=False)), path)
    with pytest.raises(CheckpointError, match="trainer state"):
        run_stages(_one_stage(1), tiny_config, _samples(2), resume=str(path))


def test_resume_rejects_a_different_budget(tmp_path, tiny_config):
    run_stages(_one_stage(2), tiny_config, _samples(2), out_dir=str(tmp_path), checkpoint_every=1)
    with pytest.raises(CheckpointError, match="iterations"):
        run_stages(_one_stage(2), tiny_config, _samples(3), resume=str(tmp_path / "stage1.ckpt"))


def test_stage_index_is_checked(tiny_config):
    with pytest.raises(TrainingError, match="stage must lie"):
        run_stages(_one_stage(1), tiny_config, _samples(1), only_stage=2)


def test_empty_dataset(tiny_config):
    with pytest.raises(TrainingError, match="empty"):
        Trainer(tiny_config, [])


def test_training_log_without_file():
    log = TrainingLog()
    log.iteration(1, 1, 0.01, 2.5)
    log.epoch(1, "train-rgb", 2.5, 0.5, 0.25)
    iterations, epochs = log.frames()
    assert iterations.iloc[0].to_dict() == {"iter": 1, "epoch": 1, "lr": 0.01, "loss": 2.5}
    assert epochs.iloc[0]["stage"] == "train-rgb"


def test_augmented_training_runs_on_disk_data(train_dataset, tiny_config):
    params = AugmentParams(scale_range=(0.5, 2.0), crop=32, jitter=True)
    result = run_stages(
        _one_stage(1), tiny_config, train_dataset, optim_defaults=OptimState(base_lr=0.01), augment_params=params
    )
    assert len(result.log.iterations) == len(train_dataset)
    assert np.isfinite([row["loss"] for row in result.log.iterations]).all()


@pytest.mark.slow
def test_toy_model_overfits_a_small_set(tmp_path):
    gen_synthetic(8, 96, TOY_CLASSES, seed=0, out_dir=str(tmp_path), val_fraction=0.0)
    dataset = SegmentationDataset(str(tmp_path / "manifest.tsv"), synthetic_class_map(TOY_CLASSES))
    config = ModelConfig.toy(num_classes=TOY_CLASSES)
    result = run_stages(
        StagePlan.compressed((20, 20, 60)),
        config,
        dataset,
        optim_defaults=OptimState(base_lr=0.01),
        augment_params=AugmentParams(scale_range=(1.0, 1.0), crop=96, hflip_prob=0.5),
    )
    report = evaluate(result.model, dataset, synthetic_class_map(TOY_CLASSES))
    assert report.pixel_accuracy >= 0.95
    assert report.mean_iou >= 0.85
