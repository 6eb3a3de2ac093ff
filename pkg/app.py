import logging
import os
import sys

import click

from autograd.tensor import no_grad
from config import SCHEMA, load_run_config
from dataio.augment import AugmentParams
from dataio.class_maps import get_class_map, palette_for
from dataio.loader import SegmentationDataset, read_depth, read_rgb
from dataio.synthetic import gen_synthetic
from evaluator import compare_reports, evaluate, save_prediction
from exceptions import CheckpointError, DataError, SegNetError
from extensions import configure_logging
from models.checkpoint import load_checkpoint, read_checkpoint
from models.segnet_model import SegNet
from trainer import OptimState, Stage, StagePlan, run_stages
from verify import SUITES, run_suites

logger = logging.getLogger(__name__)


class UserError(click.ClickException):
    exit_code = 1

    def show(self, file=None):
        click.echo(f"❌ {self.message}", err=True)


class InternalError(click.ClickException):
    exit_code = 2

    def show(self, file=None):
        click.echo(f"❌ internal failure: {self.message}", err=True)


class SegNetGroup(click.Group):
    """Maps library errors to exit code 1 and anything unexpected to exit code 2."""

    def parse_args(self, ctx, args):
        try:
            return super().parse_args(ctx, args)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except SegNetError as e:
            raise UserError(str(e)) from e
        except Exception as e:
            logger.exception("❌ unexpected error")
            raise InternalError(f"{type(e).__name__}: {e}") from e


def _default(key):
    return SCHEMA[key].default


@click.group(cls=SegNetGroup)
@click.option("--log-level", default=None, help="Logging level (default SEGNET_LOG_LEVEL or INFO).")
def cli(log_level):
    """RGB-D semantic segmentation: data, training, evaluation and self-checks."""
    configure_logging(log_level)


@cli.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--count", default=200, show_default=True, help="Number of scenes.")
@click.option("--size", default=96, show_default=True, help="Square image extent in pixels.")
@click.option("--classes", default=9, show_default=True, help="Classes including background.")
@click.option("--seed", default=0, show_default=True, help="Root seed.")
@click.option("--val-fraction", default=0.25, show_default=True, help="Share of scenes tagged 'val'.")
def synth_command(out_dir, count, size, classes, seed, val_fraction):
    """Generate a synthetic multi-scale RGB-D dataset."""
    manifest = gen_synthetic(count, size, classes, seed, out_dir, val_fraction=val_fraction)
    click.echo(f"✅ {len(manifest)} samples written to {os.path.join(out_dir, 'manifest.tsv')}")


def _dataset(run, split):
    class_map = get_class_map(run.data.class_map, run.model.num_classes)
    dataset = SegmentationDataset(run.data.manifest, class_map, split=split)
    if len(dataset) == 0:
        raise DataError(f"manifest {run.data.manifest} has no '{split}' samples")
    return dataset, class_map


def _train(run, plan, only_stage=None, resume=None, out_dir=None):
    dataset, _ = _dataset(run, run.data.train_split)
    out_dir = out_dir or run.train.checkpoint_dir
    log_path = run.train.log_file if os.path.isabs(run.train.log_file) else os.path.join(out_dir, run.train.log_file)
    return run_stages(
        plan,
        run.model,
        dataset,
        seed=run.seed,
        only_stage=only_stage,
        resume=resume,
        out_dir=out_dir,
        optim_defaults=OptimState(
            base_lr=run.train.base_lr,
            momentum=run.train.momentum,
            weight_decay=run.train.weight_decay,
            power=run.train.power,
        ),
        augment_params=AugmentParams.from_config(run.data, jitter=run.data.jitter),
        checkpoint_every=run.train.checkpoint_every,
        prefetch_buffer=run.data.prefetch,
        log_path=log_path,
    )


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="KEY=value run configuration (see config.example.env).")
@click.option("--stage", type=int, default=None, help="Run only this stage (1 RGB, 2 depth, 3 fusion + head).")
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Checkpoint to resume from.")
def train_command(config_path, stage, resume):
    """Staged training: RGB branch, depth branch, then fusion block and pyramid head."""
    run = load_run_config(config_path)
    result = _train(run, StagePlan.from_config(run.train), only_stage=stage, resume=resume)
    for name, path in sorted(result.checkpoints.items()):
        click.echo(f"✅ {name}: {path}")


def model_from_checkpoint(config, path) -> SegNet:
    """Build the network the checkpoint was written for (branches inferred from its entries) and load it."""
    entries = read_checkpoint(path)
    rgb = any(name.startswith("rgb.") for name in entries)
    depth = any(name.startswith("depth.") for name in entries)
    if not (rgb or depth):
        raise CheckpointError(f"{path} holds no backbone weights")
    model = SegNet(config.replace(rgb_branch=rgb, depth_branch=depth))
    load_checkpoint(model, path, strict=True)
    return model.eval()


@cli.command("eval")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run configuration.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True, help="Trained checkpoint.")
@click.option("--split", default=None, help=f"Manifest split (default {_default('EVAL_SPLIT')}).")
@click.option("--dump-predictions", "dump_dir", type=click.Path(file_okay=False), default=None,
              help="Write one indexed prediction PNG per sample here.")
def eval_command(config_path, checkpoint, split, dump_dir):
    """Per-class IoU, mean IoU and pixel accuracy on one split."""
    run = load_run_config(config_path)
    split = split or run.eval.split
    dataset, class_map = _dataset(run, split)
    model = model_from_checkpoint(run.model, checkpoint)
    report = evaluate(
        model, dataset, class_map,
        output_dir=run.eval.output_dir,
        dump_dir=dump_dir,
        palette_path=run.eval.palette,
        workers=run.eval.workers,
        split=split,
    )
    click.echo(report.to_text(), nl=False)


@cli.command("predict")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run configuration.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True, help="Trained checkpoint.")
@click.option("--rgb", "rgb_path", type=click.Path(dir_okay=False), required=True, help="RGB image.")
@click.option("--depth", "depth_path", type=click.Path(dir_okay=False), default=None,
              help="Depth image (required for RGB-D checkpoints).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Prediction PNG.")
def predict_command(config_path, checkpoint, rgb_path, depth_path, out_path):
    """Segment one image pair."""
    run = load_run_config(config_path)
    model = model_from_checkpoint(run.model, checkpoint)
    if model.config.depth_branch and depth_path is None:
        raise DataError(f"{checkpoint} is an RGB-D model; pass --depth")
    rgb = read_rgb(rgb_path)[None]
    depth = read_depth(depth_path)[None] if depth_path is not None else None
    if depth is not None and depth.shape[2:] != rgb.shape[2:]:
        raise DataError(f"{rgb_path} and {depth_path} differ in size")
    with no_grad():
        prediction = model.predict(rgb if model.config.rgb_branch else None, depth if model.config.depth_branch else None)[0]
    class_map = get_class_map(run.data.class_map, run.model.num_classes)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    save_prediction(prediction, out_path, palette_for(class_map, run.eval.palette))
    click.echo(f"✅ Prediction written to {out_path}")


@cli.command("verify")
@click.option("--suite", type=click.Choice(sorted(SUITES) + ["all"]), default="all", show_default=True,
              help="Which self-check suite to run.")
@click.pass_context
def verify_command(ctx, suite):
    """Gradient checks, oracle equivalences and shape checks; nonzero exit iff a check fails."""
    frame = run_suites([suite])
    failed = frame[~frame["passed"]]
    for suite_name, group in frame.groupby("suite", sort=False):
        click.echo(f"{suite_name}: {int(group['passed'].sum())}/{len(group)} passed")
        for note in group.loc[group["detail"].str.contains("relaxed tolerance"), "detail"].unique():
            click.echo(f"  ⚠️ {note}")
    for row in failed.itertuples():
        click.echo(f"❌ {row.suite}: {row.name} (value {row.value:.3g}, threshold {row.threshold:.3g}) {row.detail}")
    if len(failed):
        ctx.exit(1)


@cli.command("compare")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run configuration.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="compare", show_default=True,
              help="Working directory for data, checkpoints and reports.")
@click.option("--count", default=200, show_default=True, help="Synthetic scenes to generate.")
@click.option("--size", default=96, show_default=True, help="Synthetic image extent.")
@click.option("--epochs", default="20,20,60", show_default=True, help="Epochs per stage of the RGB-D run.")
def compare_command(config_path, out_dir, count, size, epochs):
    """Matched-budget RGB-only vs RGB-D runs on a synthetic set; prints the mean-IoU delta (informational)."""
    run = load_run_config(config_path)
    try:
        stage_epochs = tuple(int(e) for e in epochs.split(","))
    except ValueError as e:
        raise click.BadParameter(f"expected three comma-separated integers, got '{epochs}'") from e
    if len(stage_epochs) != 3:
        raise click.BadParameter(f"expected three comma-separated integers, got '{epochs}'")

    data_dir = os.path.join(out_dir, "data")
    gen_synthetic(count, size, run.model.num_classes, run.seed, data_dir)
    run.data.manifest = os.path.join(data_dir, "manifest.tsv")
    run.data.class_map = "synthetic"
    run.data.crop = size

    rgbd = _train(run, StagePlan.compressed(stage_epochs), out_dir=os.path.join(out_dir, "rgbd"))
    baseline_plan = StagePlan((Stage("train-rgb", sum(stage_epochs), rgb_branch=True, depth_branch=False, jitter=True),))
    rgb = _train(run, baseline_plan, out_dir=os.path.join(out_dir, "rgb"))

    dataset, class_map = _dataset(run, run.eval.split)
    reports = [
        evaluate(result.model, dataset, class_map, output_dir=os.path.join(out_dir, name, "report"), split=run.eval.split)
        for name, result in (("rgb", rgb), ("rgbd", rgbd))
    ]
    frame = compare_reports(*reports)
    frame.to_csv(os.path.join(out_dir, "compare.tsv"), sep="\t", index=False, float_format="%.6f")
    click.echo(frame.to_string(index=False, float_format=lambda v: f"{100.0 * v:.2f}"))
    delta = float(frame["delta"].iloc[-1])
    click.echo(f"Mean IoU delta (RGB-D minus RGB): {100.0 * delta:+.2f} points")


def main(argv=None) -> int:
    try:
        result = cli.main(args=argv, prog_name="segnet", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("❌ aborted", err=True)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == '__main__':
    sys.exit(main())
