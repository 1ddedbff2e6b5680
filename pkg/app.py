"""
SPRINT desk-scale command line
Pre-training, fine-tuning, sampling, evaluation and FLOPs accounting
"""

from contextlib import contextmanager
from typing import List, Optional

import click
from dotenv import load_dotenv
from loguru import logger
from pydantic import ValidationError

from clients.checkpoint_client import CheckpointClient
from clients.sample_store_client import SampleStoreClient
from config.settings import SampleConfig, SamplerSpec, load_run_config
from runners.pipeline import compare_drop_strategies, evaluate_guidance, run_pipeline
from runners.sampler import generate
from tools.cost_tools import flops_model
from tools.metrics_tools import quadrant_accuracy
from utils.error_handling import ConfigError, SprintError
from utils.formatting import render_flops
from utils.logging import configure_logging

# Load environment variables (SPRINT_SEED, SPRINT_OUT, SPRINT_LOG_LEVEL)
load_dotenv()


@contextmanager
def _one_line_errors():
    """Turn project and validation errors into a one-line reason and exit code 1."""
    try:
        yield
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "input"
        raise click.ClickException(f"{where}: {first.get('msg', 'invalid value')}") from e
    except (SprintError, FileNotFoundError) as e:
        raise click.ClickException(str(e).splitlines()[0] if str(e) else e.__class__.__name__) from e


def _parse_scales(value: str) -> List[float]:
    try:
        return [float(w) for w in value.split(",") if w.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated floats, got {value!r}") from e


config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), required=True, help="Flat run document (*.env)"
)


@click.group()
def cli():
    """SPRINT: sparse-dense residual fusion diffusion transformer at desk scale."""


@cli.command()
@config_option
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Checkpoint to continue from")
def train(config_path: str, resume: Optional[str]):
    """Pre-train, fine-tune (when configured), sample every mode, write summary.json."""
    with _one_line_errors():
        config = load_run_config(config_path)
        summary = run_pipeline(config, resume=resume)
        click.echo(
            f"loss {summary.loss_first_steps:.4f} -> {summary.loss_final:.4f}; "
            + ", ".join(f"{mode}={acc:.3f}" for mode, acc in summary.quadrant_accuracy.items())
        )


@cli.command()
@config_option
@click.option("--from", "from_ckpt", type=click.Path(dir_okay=False), required=True, help="Pre-trained checkpoint")
def finetune(config_path: str, from_ckpt: str):
    """Run only the full-token fine-tuning phase, starting from a checkpoint."""
    with _one_line_errors():
        config = load_run_config(config_path)
        if config.train.finetune is None:
            raise ConfigError("the configuration has no finetune section")
        summary = run_pipeline(config, resume=from_ckpt, phases=("finetune",))
        click.echo(f"finetune steps {summary.finetune_steps}; final loss {summary.loss_final:.4f}")


@cli.command()
@click.option("--ckpt", type=click.Path(dir_okay=False), required=True)
@click.option("--mode", type=click.Choice(["none", "cfg", "pdg"]), default="pdg", show_default=True)
@click.option("--w", "w", type=click.FloatRange(min=0), default=2.0, show_default=True, help="Guidance scale")
@click.option("--steps", type=click.IntRange(min=1), default=50, show_default=True, help="Euler steps")
@click.option("--n", "n", type=click.IntRange(min=1), default=16, show_default=True, help="Number of samples")
@click.option("--class", "class_idx", type=click.IntRange(min=0), default=None, help="Class label  [default: balanced]")
@click.option("--seed", type=int, default=0, show_default=True, envvar="SPRINT_SEED")
@click.option("--batch", "batch_size", type=click.IntRange(min=1), default=128, show_default=True)
@click.option("--view", type=click.Choice(["both", "dense", "sparse"]), default="both", show_default=True)
@click.option("--raw", is_flag=True, help="Sample with raw weights instead of EMA weights")
@click.option("--png", is_flag=True, help="Also export 8-bit PNG images")
@click.option("--out", "outdir", type=click.Path(file_okay=False), default="samples", show_default=True, envvar="SPRINT_OUT")
def sample(ckpt, mode, w, steps, n, class_idx, seed, batch_size, view, raw, png, outdir):
    """Generate samples from a checkpoint."""
    with _one_line_errors():
        configure_logging()
        model, ema, _ = CheckpointClient.load_models(ckpt)
        net = model if raw else ema
        num_classes = net.config.num_classes
        labels = [class_idx] * n if class_idx is not None else [i % num_classes for i in range(n)]
        spec = SamplerSpec(steps=steps, mode=mode, w=w, labels=labels, seed=seed, batch_size=batch_size, view=view)
        images = generate(net, spec)
        SampleStoreClient(outdir).save(images, labels, export_images=png)
        click.echo(f"{n} samples written to {outdir}")


@cli.command(name="eval")
@click.option("--samples", "samples_dir", type=click.Path(file_okay=False), default=None, help="Directory of sample arrays")
@click.option("--ckpt", type=click.Path(dir_okay=False), default=None, help="Checkpoint for a guidance-scale sweep")
@click.option("--mode", type=click.Choice(["none", "cfg", "pdg"]), default="pdg", show_default=True)
@click.option("--ws", default="1.0,1.5,2.0,3.0", show_default=True, help="Comma-separated guidance scales")
@click.option("--steps", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--n", "n", type=click.IntRange(min=1), default=400, show_default=True)
@click.option("--seed", type=int, default=1234, show_default=True, envvar="SPRINT_SEED")
@click.option("--raw", is_flag=True, help="Use raw weights instead of EMA weights")
def evaluate(samples_dir, ckpt, mode, ws, steps, n, seed, raw):
    """Score stored samples, or sweep guidance scales from a checkpoint."""
    with _one_line_errors():
        configure_logging()
        if (samples_dir is None) == (ckpt is None):
            raise click.UsageError("give exactly one of --samples or --ckpt")
        if samples_dir is not None:
            images, labels = SampleStoreClient(samples_dir).load()
            click.echo(f"quadrant_accuracy={quadrant_accuracy(images, labels):.4f} over {labels.shape[0]} samples")
            return
        model, ema, _ = CheckpointClient.load_models(ckpt)
        settings = SampleConfig(steps=steps, n=n, seed=seed)
        results = evaluate_guidance(model if raw else ema, settings, mode, _parse_scales(ws))
        for w, acc in results.items():
            click.echo(f"mode={mode} w={w:g} quadrant_accuracy={acc:.4f}")


@cli.command()
@config_option
@click.option("--ratio", type=click.FloatRange(min=0, max=1, max_open=True), default=None, help="Drop ratio  [default: from config]")
@click.option("--mode", type=click.Choice(["pretrain", "full"]), default="pretrain", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["table", "csv"]), default="table", show_default=True)
def flops(config_path, ratio, mode, fmt):
    """Print the analytical per-stage FLOPs and mode totals."""
    with _one_line_errors():
        config = load_run_config(config_path)
        r = config.train.drop.drop_ratio if ratio is None else ratio
        click.echo(render_flops(flops_model(config.model, r, mode), fmt))


@cli.command()
@config_option
def compare(config_path):
    """Pre-train once per token-drop strategy and report final losses."""
    with _one_line_errors():
        config = load_run_config(config_path)
        result = compare_drop_strategies(config)
        click.echo(
            f"final loss (last {result.window} steps): structured={result.structured:.5f} "
            f"random={result.random:.5f}"
        )
        if not result.structured_wins:
            logger.warning("random subsampling reached a lower final loss than structured subsampling")


if __name__ == "__main__":
    cli()
