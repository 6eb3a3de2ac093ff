# trainer.py - staged SGD training of the RGB-D segmentation network
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from autograd.functional import softmax_cross_entropy
from autograd.tensor import Tape, backward
from dataio.augment import AugmentParams, augment
from dataio.loader import prefetch
from evaluator import ConfusionMatrix
from exceptions import CheckpointError, TrainingError
from helper import derive_rng, epoch_order, format_float
from models.backbone import init_depth_branch_from_rgb
from models.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from models.segnet_model import GROUPS, ModelConfig, SegNet, parameter_group

logger = logging.getLogger(__name__)

STATE_KEYS = ("stage", "epoch", "iter", "max_iter")
# weight decay this large shrinks weights by most of their value every step
IMPLAUSIBLE_DECAY = 0.1


def poly_lr(base_lr: float, iter: int, max_iter: int, power: float) -> float:
    """base_lr * (1 - iter/max_iter) ** power."""
    if max_iter < 1:
        raise TrainingError(f"max_iter must be at least 1, got {max_iter}")
    if not 0 <= iter <= max_iter:
        raise TrainingError(f"iter {iter} outside [0, {max_iter}]")
    return base_lr * (1.0 - iter / max_iter) ** power


@dataclass
class OptimState:
    """SGD with momentum; per-group learning-rate multipliers (0 freezes a group)."""

    base_lr: float = 5e-5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    iter: int = 0
    max_iter: int = 1
    group_lr_multipliers: Dict[str, float] = field(default_factory=lambda: {g: 1.0 for g in GROUPS})
    group_weight_decay: Dict[str, float] = field(default_factory=dict)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self) -> float:
        return poly_lr(self.base_lr, self.iter, self.max_iter, self.power)

    def multiplier(self, group: str) -> float:
        return self.group_lr_multipliers.get(group, 1.0)

    def decay_for(self, group: str) -> float:
        return self.group_weight_decay.get(group, self.weight_decay)

    def state_entries(self, stage: int, epoch: int) -> Dict[str, np.ndarray]:
        entries = {
            f"_state.{key}": np.array([value], dtype=np.float32)
            for key, value in zip(STATE_KEYS, (stage, epoch, self.iter, self.max_iter))
        }
        for path, v in self.velocity.items():
            entries[f"_velocity.{path}"] = v
        return entries

    def restore(self, extras: Dict[str, np.ndarray]):
        self.iter = int(extras["_state.iter"][0])
        self.velocity = {
            name[len("_velocity."):]: values.copy()
            for name, values in extras.items() if name.startswith("_velocity.")
        }


def step(model, grads: Optional[Dict[str, np.ndarray]], optim: OptimState):
    """
    One SGD update of every trainable parameter.

    v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * multiplier * v

    Args:
        model: Module whose parameters are updated in place
        grads: path -> gradient; None reads each parameter's `.grad`
        optim: OptimState, its iteration counter advances by one
    """
    if optim.iter >= optim.max_iter:
        raise TrainingError(f"iteration budget of {optim.max_iter} steps is used up")
    lr = optim.lr()
    for path, param in model.named_parameters():
        group = parameter_group(path)
        multiplier = optim.multiplier(group)
        if multiplier == 0.0 or not param.requires_grad:
            param.grad = None
            continue
        grad = grads.get(path) if grads is not None else param.grad
        if grad is None:
            raise TrainingError(f"parameter {path} has no gradient this iteration")
        decay = optim.decay_for(group) if param.decay else 0.0
        velocity = optim.velocity.get(path)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        velocity = optim.momentum * velocity + (grad + decay * param.data)
        param.data = (param.data - (lr * multiplier) * velocity).astype(param.dtype)
        optim.velocity[path] = velocity.astype(param.dtype)
        param.grad = None
    optim.iter += 1


@dataclass(frozen=True)
class ScheduleEvent:
    """From `epoch` (1-based) onward: a new base lr and/or per-group weight decay."""

    epoch: int
    base_lr: Optional[float] = None
    group_weight_decay: Tuple[Tuple[str, float], ...] = ()

    def apply(self, optim: OptimState):
        if self.base_lr is not None:
            if self.base_lr > optim.base_lr:
                logger.warning(
                    f"⚠️ Epoch {self.epoch}: base learning rate rises from {optim.base_lr:g} to {self.base_lr:g}"
                )
            optim.base_lr = self.base_lr
        for group, decay in self.group_weight_decay:
            if decay >= IMPLAUSIBLE_DECAY:
                logger.warning(f"⚠️ Epoch {self.epoch}: weight decay {decay:g} on group '{group}' is unusually large")
            optim.group_weight_decay[group] = decay


@dataclass(frozen=True)
class Stage:
    name: str
    epochs: int
    rgb_branch: bool = True
    depth_branch: bool = True
    frozen: Tuple[str, ...] = ()
    jitter: bool = False
    events: Tuple[ScheduleEvent, ...] = ()

    def model_config(self, config: ModelConfig) -> ModelConfig:
        return config.replace(rgb_branch=self.rgb_branch, depth_branch=self.depth_branch)


@dataclass(frozen=True)
class StagePlan:
    stages: Tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise TrainingError("a stage plan needs at least one stage")
        for stage in self.stages:
            if stage.rgb_branch and stage.depth_branch and not {"rgb", "depth"} <= set(stage.frozen):
                raise TrainingError(f"stage '{stage.name}' trains the fusion head but leaves a backbone unfrozen")

    @classmethod
    def default(cls, epochs=(200, 200, 200), event_epoch: Optional[int] = 140,
                event_base_lr: Optional[float] = 5e-4, event_head_weight_decay: Optional[float] = 0.999):
        events = ()
        if event_epoch is not None:
            decay = (("head", event_head_weight_decay),) if event_head_weight_decay is not None else ()
            events = (ScheduleEvent(event_epoch, event_base_lr, decay),)
        rgb_epochs, depth_epochs, fusion_epochs = epochs
        return cls((
            Stage("train-rgb", rgb_epochs, rgb_branch=True, depth_branch=False, jitter=True, events=events),
            Stage("train-depth", depth_epochs, rgb_branch=False, depth_branch=True, events=events),
            Stage("train-fusion-head", fusion_epochs, frozen=("rgb", "depth"), events=events),
        ))

    @classmethod
    def compressed(cls, epochs=(20, 20, 60)):
        """The staged protocol without schedule events, for desk-scale runs."""
        return cls.default(epochs=epochs, event_epoch=None)

    @classmethod
    def from_config(cls, train_config):
        return cls.default(
            epochs=tuple(train_config.epochs),
            event_epoch=train_config.event_epoch,
            event_base_lr=train_config.event_base_lr,
            event_head_weight_decay=train_config.event_head_weight_decay,
        )


class TrainingLog:
    """
    Per-iteration and per-epoch records; lines also go to `path` when given.

    Iteration lines read `iter=<n> epoch=<e> lr=<v> loss=<v>`.
    """

    def __init__(self, path=None):
        self.iterations: List[Dict] = []
        self.epochs: List[Dict] = []
        self.path = path
        self._lines = None
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._lines = logging.getLogger(f"{__name__}.log.{os.path.abspath(path)}")
            self._lines.setLevel(logging.INFO)
            self._lines.propagate = False
            for handler in list(self._lines.handlers):
                self._lines.removeHandler(handler)
                handler.close()
            handler = logging.FileHandler(path, mode="a", encoding="utf-8")
            handler.setFormatter(logging.Formatter("%(message)s"))
            self._lines.addHandler(handler)

    def _write(self, line: str):
        if self._lines is not None:
            self._lines.info(line)

    def iteration(self, iter: int, epoch: int, lr: float, loss: float):
        self.iterations.append({"iter": iter, "epoch": epoch, "lr": lr, "loss": loss})
        self._write(f"iter={iter} epoch={epoch} lr={format_float(lr)} loss={format_float(loss)}")

    def epoch(self, epoch: int, stage: str, loss: float, pixel_acc: float, miou: float):
        self.epochs.append({"epoch": epoch, "stage": stage, "loss": loss, "pixel_acc": pixel_acc, "miou": miou})
        line = (
            f"epoch={epoch} stage={stage} loss={format_float(loss)} "
            f"pixel_acc={format_float(pixel_acc)} miou={format_float(miou)}"
        )
        self._write(line)
        logger.info(f"✅ {line}")

    def frames(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        return (
            pd.DataFrame(self.iterations, columns=["iter", "epoch", "lr", "loss"]),
            pd.DataFrame(self.epochs, columns=["epoch", "stage", "loss", "pixel_acc", "miou"]),
        )

    def close(self):
        if self._lines is not None:
            for handler in list(self._lines.handlers):
                self._lines.removeHandler(handler)
                handler.close()


@dataclass
class TrainResult:
    model: SegNet
    log: TrainingLog
    checkpoints: Dict[str, str]


def _trainable(model: SegNet):
    return [p for _, p in model.named_parameters() if p.requires_grad]


class Trainer:
    """
    Runs a StagePlan: RGB branch, then depth branch, then the fusion block
    and pyramid head on top of both frozen branches.

    Args:
        config: ModelConfig of the final RGB-D network
        dataset: indexable training samples (batch size is always one)
        seed: root seed (initialisation, shuffling, augmentation)
        out_dir: checkpoint directory; None keeps everything in memory
        optim_defaults: OptimState template (base_lr, momentum, weight_decay, power)
        augment_params: AugmentParams or None for no augmentation
        checkpoint_every: epochs between intermediate checkpoints
        prefetch_buffer: decoded samples in flight
        log_path: training log file
    """

    def __init__(self, config: ModelConfig, dataset, seed: int = 0, out_dir=None,
                 optim_defaults: Optional[OptimState] = None, augment_params: Optional[AugmentParams] = None,
                 checkpoint_every: int = 10, prefetch_buffer: int = 4, log_path=None):
        if len(dataset) == 0:
            raise TrainingError("training dataset is empty")
        self.config = config
        self.dataset = dataset
        self.seed = seed
        self.out_dir = out_dir
        self.optim_defaults = optim_defaults or OptimState()
        self.augment_params = augment_params
        self.checkpoint_every = checkpoint_every
        self.prefetch_buffer = prefetch_buffer
        self.log = TrainingLog(log_path)
        self.models: Dict[int, SegNet] = {}
        self.checkpoints: Dict[str, str] = {}

    def checkpoint_path(self, index: int) -> Optional[str]:
        if self.out_dir is None:
            return None
        return os.path.join(self.out_dir, f"stage{index}.ckpt")

    # ---- stage models ----

    def build_stage_model(self, plan: StagePlan, index: int) -> SegNet:
        stage = plan.stages[index - 1]
        model = SegNet(stage.model_config(self.config), seed=self.seed)
        if stage.rgb_branch and stage.depth_branch:
            self._load_branch(plan, model, "rgb")
            self._load_branch(plan, model, "depth")
        elif stage.depth_branch:
            rgb_source = self._branch_source(plan, "rgb", required=self._stage_index(plan, "rgb") is not None)
            if rgb_source is not None:
                init_depth_branch_from_rgb(model.depth, rgb_source.rgb)
                logger.info("✅ Depth branch initialised from the trained RGB branch")
        for group in stage.frozen:
            model.set_frozen(group)
        return model

    def _stage_index(self, plan: StagePlan, branch: str) -> Optional[int]:
        for index, stage in enumerate(plan.stages, start=1):
            only_rgb = stage.rgb_branch and not stage.depth_branch
            only_depth = stage.depth_branch and not stage.rgb_branch
            if (branch == "rgb" and only_rgb) or (branch == "depth" and only_depth):
                return index
        return None

    def _branch_source(self, plan: StagePlan, branch: str, required: bool = True) -> Optional[SegNet]:
        index = self._stage_index(plan, branch)
        if index is not None and index in self.models:
            return self.models[index]
        path = self.checkpoint_path(index) if index is not None else None
        if path is not None and os.path.exists(path):
            stage = plan.stages[index - 1]
            source = SegNet(stage.model_config(self.config), seed=self.seed)
            load_checkpoint(source, path, strict=True)
            self.models[index] = source
            return source
        if required:
            raise CheckpointError(f"no trained '{branch}' branch available (expected {path})")
        return None

    def _load_branch(self, plan: StagePlan, model: SegNet, branch: str):
        source = self._branch_source(plan, branch)
        target = model.state_dict()
        prefix = f"{branch}."
        for path, tensor in source.state_dict().items():
            if not path.startswith(prefix):
                continue
            if path not in target or target[path].shape != tensor.shape:
                raise CheckpointError(f"stage checkpoint entry {path} does not fit the fused model")
            target[path].data = tensor.data.astype(target[path].dtype).copy()

    # ---- training ----

    def _transform(self, stage_index: int, epoch: int, jitter: bool):
        if self.augment_params is None:
            return None
        params = replace(self.augment_params, jitter=jitter and self.augment_params.jitter)

        def transform(index, sample):
            rng = derive_rng(self.seed, f"augment/{stage_index}/{epoch}/{index}")
            return augment(sample, params, rng)
        return transform

    def _save(self, model: SegNet, optim: OptimState, index: int, epoch: int):
        path = self.checkpoint_path(index)
        if path is None:
            return
        save_checkpoint(model, path, extras=optim.state_entries(index, epoch))
        self.checkpoints[f"stage{index}"] = path

    def run_stage(self, plan: StagePlan, index: int, resume_extras: Optional[Dict[str, np.ndarray]] = None,
                  model: Optional[SegNet] = None) -> SegNet:
        stage = plan.stages[index - 1]
        model = model or self.build_stage_model(plan, index)
        n = len(self.dataset)
        optim = OptimState(
            base_lr=self.optim_defaults.base_lr,
            momentum=self.optim_defaults.momentum,
            weight_decay=self.optim_defaults.weight_decay,
            power=self.optim_defaults.power,
            max_iter=max(1, stage.epochs * n),
            group_lr_multipliers={g: 0.0 if g in stage.frozen else 1.0 for g in GROUPS},
        )
        start_epoch = 1
        if resume_extras:
            optim.restore(resume_extras)
            start_epoch = int(resume_extras["_state.epoch"][0]) + 1
            for event in stage.events:
                if event.epoch < start_epoch:
                    event.apply(optim)
            logger.info(f"🔄 Resuming stage '{stage.name}' at epoch {start_epoch}, iteration {optim.iter}")

        if stage.epochs == 0:
            logger.warning(f"⚠️ Stage '{stage.name}' has no epochs; keeping its initial weights")
        else:
            logger.info(f"🔄 Stage {index} '{stage.name}': {stage.epochs} epochs x {n} samples")

        model.train()
        trainable = _trainable(model)
        k = model.config.num_classes
        for epoch in range(start_epoch, stage.epochs + 1):
            for event in stage.events:
                if event.epoch == epoch:
                    event.apply(optim)
            confusion = ConfusionMatrix(k)
            losses = []
            order = epoch_order(self.seed, index * 100003 + epoch, n)
            transform = self._transform(index, epoch, stage.jitter)
            for sample in prefetch(self.dataset, order, transform, buffer=self.prefetch_buffer):
                rgb, depth, labels = sample.batch()
                with Tape.scope():
                    logits = model(rgb if stage.rgb_branch else None, depth if stage.depth_branch else None)
                    loss = softmax_cross_entropy(logits, labels)
                    backward(loss, inputs=trainable)
                confusion.accumulate(labels[0], logits.data[0].argmax(axis=0))
                lr = optim.lr()
                step(model, None, optim)
                losses.append(loss.item())
                self.log.iteration(optim.iter, epoch, lr, loss.item())
            result = confusion.iou()
            self.log.epoch(epoch, stage.name, float(np.mean(losses)), confusion.pixel_accuracy(), result.mean)
            if epoch % self.checkpoint_every == 0 and epoch < stage.epochs:
                self._save(model, optim, index, epoch)

        self._save(model, optim, index, stage.epochs)
        self.models[index] = model
        return model

    def run(self, plan: StagePlan, only_stage: Optional[int] = None, resume=None) -> TrainResult:
        try:
            if only_stage is not None and not 1 <= only_stage <= len(plan.stages):
                raise TrainingError(f"stage must lie in 1..{len(plan.stages)}, got {only_stage}")
            first, resume_extras, resumed_model = 1, None, None
            if resume is not None:
                first, resume_extras, resumed_model = self._resume(plan, resume)
                if only_stage is not None and resumed_model is not None and only_stage != first:
                    raise CheckpointError(f"{resume} resumes stage {first}, but stage {only_stage} was requested")
            indices = range(first, len(plan.stages) + 1) if only_stage is None else [only_stage]
            model = None
            for index in indices:
                resuming = resumed_model is not None and index == first
                model = self.run_stage(
                    plan, index, resume_extras if resuming else None, resumed_model if resuming else None
                )
        finally:
            self.log.close()
        if model is None:
            model = self.models.get(len(plan.stages)) or self.build_stage_model(plan, len(plan.stages))
        logger.info("✅ Training finished")
        return TrainResult(model=model, log=self.log, checkpoints=dict(self.checkpoints))

    def _resume(self, plan: StagePlan, path):
        """(first stage to run, trainer state, partially trained model or None)."""
        entries = read_checkpoint(path)
        missing = [f"_state.{key}" for key in STATE_KEYS if f"_state.{key}" not in entries]
        if missing:
            raise CheckpointError(f"{path} carries no trainer state ({', '.join(missing)})")
        index = int(entries["_state.stage"][0])
        if not 1 <= index <= len(plan.stages):
            raise CheckpointError(f"{path} belongs to stage {index}, the plan has {len(plan.stages)}")
        stage = plan.stages[index - 1]
        expected_max_iter = max(1, stage.epochs * len(self.dataset))
        if int(entries["_state.max_iter"][0]) != expected_max_iter:
            raise CheckpointError(
                f"{path} was written for {int(entries['_state.max_iter'][0])} iterations in stage {index}, "
                f"this run plans {expected_max_iter}"
            )
        model = SegNet(stage.model_config(self.config), seed=self.seed)
        report = load_checkpoint(model, path, strict=True)
        for group in stage.frozen:
            model.set_frozen(group)
        if int(entries["_state.epoch"][0]) >= stage.epochs:
            self.models[index] = model
            return index + 1, None, None
        return index, report.extras, model


def run_stages(plan: StagePlan, config: ModelConfig, dataset, seed: int = 0, **kwargs) -> TrainResult:
    """Train every stage of `plan`; keyword arguments go to Trainer."""
    only_stage = kwargs.pop("only_stage", None)
    resume = kwargs.pop("resume", None)
    return Trainer(config, dataset, seed=seed, **kwargs).run(plan, only_stage=only_stage, resume=resume)
