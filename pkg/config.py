import os
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Any, Callable, Dict, NamedTuple, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from exceptions import ConfigError

load_dotenv()


class Config:
    # Worker cap for prefetching and parallel evaluation
    THREADS = int(os.environ.get('SEGNET_THREADS') or os.cpu_count() or 1)

    LOG_LEVEL = os.environ.get('SEGNET_LOG_LEVEL', 'INFO')

    # Where checkpoints go unless the run config says otherwise
    CHECKPOINT_DIR = os.environ.get('SEGNET_CHECKPOINT_DIR', './checkpoints')


@dataclass
class DataConfig:
    manifest: str = 'data/synthetic/manifest.tsv'
    class_map: str = 'synthetic'
    train_split: str = 'train'
    scale_min: float = 0.5
    scale_max: float = 2.0
    crop: int = 720
    hflip_prob: float = 0.5
    jitter: bool = True
    rescale_depth: bool = False
    prefetch: int = 4


@dataclass
class TrainConfig:
    base_lr: float = 5e-5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    epochs: Tuple[int, ...] = (200, 200, 200)
    event_epoch: Optional[int] = 140
    event_base_lr: Optional[float] = 5e-4
    event_head_weight_decay: Optional[float] = 0.999
    checkpoint_dir: str = field(default_factory=lambda: Config.CHECKPOINT_DIR)
    checkpoint_every: int = 10
    log_file: str = 'train.log'


@dataclass
class EvalConfig:
    split: str = 'val'
    output_dir: str = 'reports'
    palette: Optional[str] = None
    workers: Optional[int] = None


@dataclass
class RunConfig:
    model: Any = None
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        if self.model is None:
            from models.segnet_model import ModelConfig
            self.model = ModelConfig()


# ---- value parsers ----

def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"expected true/false, got '{text}'")


def _int_tuple(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(',') if part.strip())


def _optional(parser: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        if text.strip().lower() in ('', 'none'):
            return None
        return parser(text)
    return parse


def _text(text: str) -> str:
    return text.strip()


class SchemaEntry(NamedTuple):
    section: Optional[str]
    field: str
    parser: Callable[[str], Any]
    default: str
    help: str


SCHEMA: Dict[str, SchemaEntry] = {
    'MODEL_OUTPUT_STRIDE': SchemaEntry('model', 'output_stride', int, '8', 'backbone output stride: 8, 16 or 32'),
    'MODEL_BLOCK_DEPTHS': SchemaEntry('model', 'block_depths', _int_tuple, '2,2,2,2', 'bottleneck blocks per stage (3,4,23,3 is ResNet-101)'),
    'MODEL_WIDTH_MULTIPLIER': SchemaEntry('model', 'width_multiplier', Fraction, '1/8', 'channel width scale'),
    'MODEL_FUSION_MODE': SchemaEntry('model', 'fusion_mode', _text, 'concat', 'sum or concat'),
    'MODEL_FUSION_CHANNELS': SchemaEntry('model', 'fusion_channels', _optional(int), '', 'fusion/pyramid width; empty = 512 x width multiplier'),
    'MODEL_PYRAMID_PRESET': SchemaEntry('model', 'pyramid_preset', _text, 'default', 'default or deeplab-v2'),
    'MODEL_PYRAMID_RATES': SchemaEntry('model', 'pyramid_rates', _optional(_int_tuple), '', 'dilation rates; empty = preset rates'),
    'MODEL_PYRAMID_GAP': SchemaEntry('model', 'pyramid_gap', _optional(_bool), '', 'pooled context level; empty = preset choice'),
    'MODEL_NUM_CLASSES': SchemaEntry('model', 'num_classes', int, '19', 'must equal the class map target count'),
    'MODEL_DEPTH_BRANCH': SchemaEntry('model', 'depth_branch', _bool, 'true', 'build the depth branch'),
    'MODEL_RGB_BRANCH': SchemaEntry('model', 'rgb_branch', _bool, 'true', 'build the RGB branch'),
    'MODEL_BN_MOMENTUM': SchemaEntry('model', 'bn_momentum', float, '0.1', 'running statistics momentum'),
    'DATA_MANIFEST': SchemaEntry('data', 'manifest', _text, 'data/synthetic/manifest.tsv', 'tab-separated sample manifest'),
    'DATA_CLASS_MAP': SchemaEntry('data', 'class_map', _text, 'synthetic', 'cityscapes, carla, cityscapes-to-carla or synthetic'),
    'DATA_TRAIN_SPLIT': SchemaEntry('data', 'train_split', _text, 'train', 'manifest split used for training'),
    'DATA_SCALE_MIN': SchemaEntry('data', 'scale_min', float, '0.5', 'lower random scale factor'),
    'DATA_SCALE_MAX': SchemaEntry('data', 'scale_max', float, '2.0', 'upper random scale factor'),
    'DATA_CROP': SchemaEntry('data', 'crop', int, '720', 'square training crop'),
    'DATA_HFLIP_PROB': SchemaEntry('data', 'hflip_prob', float, '0.5', 'left-right flip probability'),
    'DATA_JITTER': SchemaEntry('data', 'jitter', _bool, 'true', 'colour jitter while training the RGB branch'),
    'DATA_RESCALE_DEPTH': SchemaEntry('data', 'rescale_depth', _bool, 'false', 'divide depth by the scale factor'),
    'DATA_PREFETCH': SchemaEntry('data', 'prefetch', int, '4', 'decoded samples in flight'),
    'TRAIN_BASE_LR': SchemaEntry('train', 'base_lr', float, '5e-05', 'base learning rate'),
    'TRAIN_MOMENTUM': SchemaEntry('train', 'momentum', float, '0.9', 'SGD momentum'),
    'TRAIN_WEIGHT_DECAY': SchemaEntry('train', 'weight_decay', float, '0.0005', 'weight decay on conv weights'),
    'TRAIN_POWER': SchemaEntry('train', 'power', float, '0.9', 'poly schedule exponent'),
    'TRAIN_EPOCHS': SchemaEntry('train', 'epochs', _int_tuple, '200,200,200', 'epochs for the rgb, depth and fusion stages'),
    'TRAIN_EVENT_EPOCH': SchemaEntry('train', 'event_epoch', _optional(int), '140', 'epoch of the schedule change; empty = none'),
    'TRAIN_EVENT_BASE_LR': SchemaEntry('train', 'event_base_lr', _optional(float), '0.0005', 'base lr from the event epoch on'),
    'TRAIN_EVENT_HEAD_WEIGHT_DECAY': SchemaEntry('train', 'event_head_weight_decay', _optional(float), '0.999', 'pyramid head weight decay from the event epoch on'),
    'TRAIN_CHECKPOINT_DIR': SchemaEntry('train', 'checkpoint_dir', _text, './checkpoints', 'checkpoint directory'),
    'TRAIN_CHECKPOINT_EVERY': SchemaEntry('train', 'checkpoint_every', int, '10', 'epochs between checkpoints'),
    'TRAIN_LOG_FILE': SchemaEntry('train', 'log_file', _text, 'train.log', 'training log, relative to the checkpoint directory'),
    'EVAL_SPLIT': SchemaEntry('eval', 'split', _text, 'val', 'manifest split to evaluate'),
    'EVAL_OUTPUT_DIR': SchemaEntry('eval', 'output_dir', _text, 'reports', 'report directory'),
    'EVAL_PALETTE': SchemaEntry('eval', 'palette', _optional(_text), '', 'palette file for colour predictions'),
    'EVAL_WORKERS': SchemaEntry('eval', 'workers', _optional(int), '', 'parallel evaluation workers; empty = SEGNET_THREADS'),
    'SEED': SchemaEntry(None, 'seed', int, '0', 'root seed for every random stream'),
}


def _line_numbers(path) -> Dict[str, int]:
    numbers = {}
    with open(path, encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith('#'):
                continue
            if stripped.startswith('export '):
                stripped = stripped[len('export '):]
            key = stripped.split('=', 1)[0].strip()
            numbers.setdefault(key, number)
    return numbers


def parse_values(values: Dict[str, Optional[str]], lines: Optional[Dict[str, int]] = None) -> RunConfig:
    """Build a RunConfig from raw KEY -> text pairs; keys missing from `values` keep their defaults."""
    from models.segnet_model import ModelConfig

    lines = lines or {}
    sections: Dict[Optional[str], Dict[str, Any]] = {'model': {}, 'data': {}, 'train': {}, 'eval': {}, None: {}}
    for key, raw in values.items():
        entry = SCHEMA.get(key)
        if entry is None:
            raise ConfigError('unknown configuration key', key=key, line=lines.get(key))
        if raw is None:
            raise ConfigError('key has no value', key=key, line=lines.get(key))
        try:
            sections[entry.section][entry.field] = entry.parser(raw)
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"cannot parse '{raw}': {e}", key=key, line=lines.get(key)) from e

    try:
        model = ModelConfig(**sections['model'])
    except ConfigError as e:
        field_name = e.key
        key = next((k for k, v in SCHEMA.items() if v.section == 'model' and v.field == field_name), field_name)
        raise ConfigError(e.reason, key=key, line=lines.get(key)) from e

    run = RunConfig(
        model=model,
        data=DataConfig(**sections['data']),
        train=TrainConfig(**sections['train']),
        eval=EvalConfig(**sections['eval']),
        seed=sections[None].get('seed', 0),
    )
    validate(run, lines)
    return run


def validate(run: RunConfig, lines: Optional[Dict[str, int]] = None):
    lines = lines or {}

    def fail(message, key):
        raise ConfigError(message, key=key, line=lines.get(key))

    if not 0 < run.data.scale_min <= run.data.scale_max:
        fail('scale range must satisfy 0 < min <= max', 'DATA_SCALE_MIN')
    if run.data.crop < 1:
        fail('crop must be positive', 'DATA_CROP')
    if not 0.0 <= run.data.hflip_prob <= 1.0:
        fail('flip probability must lie in [0, 1]', 'DATA_HFLIP_PROB')
    if run.data.prefetch < 1:
        fail('prefetch must be at least 1', 'DATA_PREFETCH')
    if run.train.base_lr < 0 or run.train.weight_decay < 0:
        fail('learning rate and weight decay must be non-negative', 'TRAIN_BASE_LR')
    if run.train.power <= 0:
        fail('poly power must be positive', 'TRAIN_POWER')
    if len(run.train.epochs) != 3 or min(run.train.epochs) < 0:
        fail('epochs needs three non-negative counts', 'TRAIN_EPOCHS')
    if run.train.checkpoint_every < 1:
        fail('checkpoint interval must be at least 1', 'TRAIN_CHECKPOINT_EVERY')

    from dataio.class_maps import get_class_map

    try:
        class_map = get_class_map(run.data.class_map, run.model.num_classes)
    except ConfigError as e:
        fail(e.reason, 'DATA_CLASS_MAP')
    if class_map.num_classes != run.model.num_classes:
        fail(
            f"class map '{class_map.name}' has {class_map.num_classes} classes, model has {run.model.num_classes}",
            'MODEL_NUM_CLASSES',
        )


def load_run_config(path=None) -> RunConfig:
    """
    Read a KEY=value run configuration.

    Args:
        path: config file; None gives the all-defaults configuration

    Returns:
        RunConfig
    """
    if path is None:
        return parse_values({})
    if not os.path.exists(path):
        raise ConfigError(f'config file not found: {path}')
    values = dotenv_values(path, interpolate=False)
    return parse_values(dict(values), _line_numbers(path))


def run_config_fields() -> Dict[str, Tuple[str, ...]]:
    """Field names per section, for documentation and schema checks."""
    from models.segnet_model import ModelConfig

    return {
        'model': tuple(f.name for f in fields(ModelConfig)),
        'data': tuple(f.name for f in fields(DataConfig)),
        'train': tuple(f.name for f in fields(TrainConfig)),
        'eval': tuple(f.name for f in fields(EvalConfig)),
    }
