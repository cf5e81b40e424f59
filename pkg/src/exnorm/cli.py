"""Command-line interface."""

__all__ = ["count", "gradcheck", "help", "main", "ratios", "train"]

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Sequence

import click
import numpy as np
import structlog
from safir.logging import configure_logging

from exnorm.archspec import architecture_report, micro_cnn_spec, resnet50_spec
from exnorm.checkpoint import load_checkpoint, save_checkpoint
from exnorm.config import Configuration, read_config_file, write_config_file
from exnorm.data import (
    Cifar10Source,
    DatasetSource,
    SyntheticSource,
    load_source,
)
from exnorm.exemplarnorm import ENConfig
from exnorm.gradcheck import check_layer
from exnorm.layers import NORM_TYPES
from exnorm.manifest import RunManifest
from exnorm.network import build_micro_cnn
from exnorm.ratios import (
    Grouping,
    aggregate,
    export_aggregates,
    export_records,
    export_vectors,
    record_ratios,
    sample_vectors,
)
from exnorm.trainer import LRSchedule, TrainConfig, write_history_csv
from exnorm.trainer import train as train_model
from exnorm.types import (
    ExitCode,
    NoExemplarLayersError,
    NonFiniteError,
    NormTypeNotFoundError,
    TrainingDivergedError,
)

# Add -h as a help shortcut option
CONTEXT_SETTINGS = dict(help_option_names=["-h", "--help"])

VARIANTS = ("none", "a", "b", "c", "d")
GRADCHECK_LAYERS = NORM_TYPES + ("en-a", "en-b", "en-c", "en-d")
GRADCHECK_TOLERANCE = 1e-4
RESOLVED_NAME = "resolved.conf"

# Options that take several values; a config file gives one of them.
_MULTIPLE = {"variant"}

logger = structlog.get_logger(__name__)


def _load_config_file(
    ctx: click.Context, param: click.Parameter, value: Optional[str]
) -> None:
    """Feed a ``key = value`` file into the command's defaults."""
    if not value:
        return
    try:
        values: Dict[str, Any] = dict(read_config_file(Path(value)))
    except (OSError, ValueError) as e:
        raise click.BadParameter(str(e), ctx=ctx, param=param)
    for key in _MULTIPLE & set(values):
        values[key] = [values[key]]
    ctx.default_map = {**(ctx.default_map or {}), **values}


def config_option(f: Any) -> Any:
    return click.option(
        "--config",
        type=click.Path(exists=True, dir_okay=False),
        callback=_load_config_file,
        is_eager=True,
        expose_value=False,
        help="Read defaults from a key = value file; flags still win.",
    )(f)


def seed_option(f: Any) -> Any:
    return click.option(
        "--seed",
        type=int,
        default=lambda: Configuration().seed,
        show_default="EXNORM_SEED or 0",
        help="Seed of every random choice.",
    )(f)


def data_options(f: Any) -> Any:
    options = [
        click.option(
            "--data",
            default="synthetic",
            show_default=True,
            help="synthetic, or cifar10:PATH for a file or directory.",
        ),
        click.option("--classes", default=3, show_default=True),
        click.option("--per-class", default=100, show_default=True),
        click.option("--image-size", default=16, show_default=True),
        click.option(
            "--subset", type=int, default=None, help="CIFAR-10 sample cap."
        ),
    ]
    for option in reversed(options):
        f = option(f)
    return f


@contextmanager
def _exit_codes(ctx: click.Context) -> Iterator[None]:
    """Map library errors onto the exit-code contract."""
    try:
        yield
    except (NonFiniteError, TrainingDivergedError) as e:
        logger.error("Numeric failure", error=str(e))
        click.echo(f"Error: {e}", err=True)
        ctx.exit(ExitCode.NUMERIC)
    except (ValueError, NormTypeNotFoundError, NoExemplarLayersError) as e:
        raise click.UsageError(str(e), ctx)
    except OSError as e:
        logger.error("I/O failure", error=str(e))
        raise click.UsageError(str(e), ctx)


def _single_variant(variant: Sequence[str]) -> Optional[str]:
    if len(variant) > 1:
        raise click.UsageError(
            f"--variant may be given once, got {', '.join(variant)}"
        )
    if not variant or variant[0] == "none":
        return None
    return variant[0]


def _parse_source(
    data: str,
    classes: int,
    per_class: int,
    image_size: int,
    seed: int,
    subset: Optional[int],
) -> DatasetSource:
    if data == "synthetic":
        return SyntheticSource(classes, per_class, image_size, seed)
    if data.startswith("cifar10:"):
        return Cifar10Source(Path(data[len("cifar10:") :]), subset)
    raise click.BadParameter(
        f"Unknown dataset {data!r}", param_hint="--data"
    )


def _resolved(params: Dict[str, Any]) -> Dict[str, Any]:
    """Flag values in a JSON- and config-file-friendly form."""
    resolved: Dict[str, Any] = {}
    for key, value in params.items():
        if key in _MULTIPLE:
            value = value[0] if value else "none"
        elif isinstance(value, Path):
            value = str(value)
        elif isinstance(value, tuple):
            value = list(value)
        resolved[key] = value
    return resolved


def _finish(
    command: str,
    params: Dict[str, Any],
    out: Path,
    artifacts: Dict[str, str],
) -> None:
    resolved = _resolved(params)
    write_config_file(out / RESOLVED_NAME, resolved)
    artifacts["resolved_config"] = RESOLVED_NAME
    RunManifest(command, resolved, int(params["seed"]), artifacts).write(out)


@click.group(context_settings=CONTEXT_SETTINGS)
@click.version_option(message="%(version)s")
@click.pass_context
def main(ctx: click.Context) -> None:
    """exnorm

    Exemplar normalization: layers, counting, training and ratio analysis.
    """
    config = Configuration()
    configure_logging(
        profile=config.profile,
        log_level=config.log_level,
        name=config.logger_name,
    )
    # Subcommands should use the click.pass_obj decorator to get this
    # ctx object as the first argument.
    ctx.obj = {"config": config}


@main.command()
@click.argument("topic", default=None, required=False, nargs=1)
@click.pass_context
def help(ctx: click.Context, topic: Optional[str]) -> None:
    """Show help for any command."""
    if topic is None:
        click.echo(ctx.find_root().get_help())
        return
    command = main.get_command(ctx, topic)
    if command is None:
        raise click.UsageError(f"No command named {topic!r}", ctx)
    ctx.info_name = topic
    click.echo(command.get_help(ctx))


@main.command()
@config_option
@click.option(
    "--norm",
    type=click.Choice(NORM_TYPES),
    default="en",
    show_default=True,
    help="Normalization at every norm site.",
)
@data_options
@click.option("--epochs", default=30, show_default=True)
@click.option("--batch", default=32, show_default=True)
@click.option("--lr", default=0.1, show_default=True)
@click.option("--warmup", default=0, show_default=True, help="Epochs.")
@click.option(
    "--decay", default="", help="Comma list of epochs that decay the lr."
)
@click.option("--factor", default=0.1, show_default=True)
@click.option("--momentum", default=0.9, show_default=True)
@click.option("--weight-decay", default=0.0, show_default=True)
@seed_option
@click.option("--r", "r", default=8, show_default=True)
@click.option("--pi", default=50, show_default=True)
@click.option("--groups", default=2, show_default=True, help="GN groups.")
@click.option(
    "--variant",
    type=click.Choice(VARIANTS),
    multiple=True,
    help="EN ablation: none, a, b, c or d.",
)
@click.option(
    "--precision", type=click.Choice(["32", "64"]), default="32"
)
@click.option("--record-ratios", is_flag=True, default=False)
@click.option(
    "--out", type=click.Path(file_okay=False, path_type=Path), required=True
)
@click.pass_context
def train(ctx: click.Context, **params: Any) -> None:
    """Train the micro-CNN and write history, checkpoint and manifest."""
    variant = _single_variant(params["variant"])
    out: Path = params["out"]
    dtype = np.float64 if params["precision"] == "64" else np.float32
    with _exit_codes(ctx):
        decay = tuple(
            int(d) for d in str(params["decay"]).split(",") if d.strip()
        )
        cfg = TrainConfig(
            epochs=params["epochs"],
            batch_size=params["batch"],
            schedule=LRSchedule(
                params["lr"], decay, params["factor"], params["warmup"]
            ),
            momentum=params["momentum"],
            weight_decay=params["weight_decay"],
            seed=params["seed"],
            record_ratios=params["record_ratios"],
        )
        source = _parse_source(
            params["data"],
            params["classes"],
            params["per_class"],
            params["image_size"],
            params["seed"],
            params["subset"],
        )
        data = load_source(source, dtype)
        model = build_micro_cnn(
            params["norm"],
            classes=data.classes,
            image_size=data.images.shape[-1],
            seed=params["seed"],
            r=params["r"],
            pi=params["pi"],
            groups=params["groups"],
            variant=variant,
            dtype=dtype,
        )
        history = train_model(model, data, cfg)

        out.mkdir(parents=True, exist_ok=True)
        artifacts = {"history": "history.csv", "checkpoint": "model.ckpt"}
        write_history_csv(history, out / artifacts["history"])
        save_checkpoint(model, out / artifacts["checkpoint"])
        if history.ratios:
            artifacts["ratios"] = "ratios.csv"
            export_records(history.ratios, out / artifacts["ratios"])
        _finish("train", params, out, artifacts)
    click.echo(
        f"final loss {history.final_loss:.6g} "
        f"(initial {history.initial_loss:.6g})"
    )


@main.command()
@config_option
@click.option(
    "--layer",
    type=click.Choice(GRADCHECK_LAYERS),
    default="en",
    show_default=True,
)
@click.option("--shape", default="2,4,3,3", show_default=True)
@seed_option
@click.option("--r", "r", default=2, show_default=True)
@click.option("--pi", default=50, show_default=True)
@click.option("--groups", default=2, show_default=True, help="GN groups.")
@click.option("--eps", default=1e-5, show_default=True)
@click.option(
    "--tolerance", default=GRADCHECK_TOLERANCE, show_default=True
)
@click.option(
    "--out", type=click.Path(file_okay=False, path_type=Path), default=None
)
@click.pass_context
def gradcheck(ctx: click.Context, **params: Any) -> None:
    """Check a layer's gradients against central differences at 64-bit."""
    with _exit_codes(ctx):
        try:
            shape = tuple(int(v) for v in params["shape"].split(","))
        except ValueError:
            raise click.BadParameter(
                f"{params['shape']!r} is not N,C,H,W", param_hint="--shape"
            )
        report = check_layer(
            params["layer"],
            shape,
            seed=params["seed"],
            r=params["r"],
            pi=params["pi"],
            groups=params["groups"],
            eps=params["eps"],
        )
    for name, error in report.items():
        click.echo(f"{name}\t{error:.3e}")
    worst = max(report.values())
    if params["out"] is not None:
        out: Path = params["out"]
        with _exit_codes(ctx):
            out.mkdir(parents=True, exist_ok=True)
            body = json.dumps(report, indent=2)
            (out / "gradcheck.json").write_text(body)
            _finish("gradcheck", params, out, {"report": "gradcheck.json"})
    if worst >= params["tolerance"]:
        click.echo(
            f"Error: max relative error {worst:.3e} exceeds "
            f"{params['tolerance']:.1e}",
            err=True,
        )
        ctx.exit(ExitCode.NUMERIC)


@main.command()
@config_option
@click.option(
    "--arch",
    type=click.Choice(["micro", "resnet50"]),
    default="resnet50",
    show_default=True,
)
@click.option(
    "--norm", type=click.Choice(NORM_TYPES), default="bn", show_default=True
)
@click.option(
    "--r", "r", type=int, default=None, help="32 for resnet50, else 8."
)
@click.option("--pi", default=50, show_default=True)
@click.option("--variant", type=click.Choice(VARIANTS), multiple=True)
@click.option("--input", "input_size", type=int, default=None)
@click.option("--classes", default=3, show_default=True, help="micro only.")
@seed_option
@click.option(
    "--out", type=click.Path(file_okay=False, path_type=Path), default=None
)
@click.pass_context
def count(ctx: click.Context, **params: Any) -> None:
    """Print parameter and FLOP counts of an architecture as JSON."""
    variant = _single_variant(params["variant"])
    if params["r"] is None:
        params["r"] = 32 if params["arch"] == "resnet50" else 8
    with _exit_codes(ctx):
        if params["arch"] == "resnet50":
            arch = resnet50_spec()
        else:
            arch = micro_cnn_spec(params["classes"])
        cfg = ENConfig.with_variant(variant, r=params["r"], pi=params["pi"])
        if params["norm"] == "en":
            for site in arch.norm_sites():
                cfg.check_channels(site.c_out)
        size = params["input_size"]
        report = architecture_report(
            arch, params["norm"], cfg, None if size is None else (size, size)
        )
    body = json.dumps(report, indent=2)
    click.echo(body)
    if params["out"] is not None:
        out: Path = params["out"]
        with _exit_codes(ctx):
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.json").write_text(body + "\n")
            _finish("count", params, out, {"report": "report.json"})


@main.command()
@config_option
@click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
)
@data_options
@seed_option
@click.option(
    "--group",
    type=click.Choice([g.value for g in Grouping]),
    default="layer",
    show_default=True,
)
@click.option("--concat", is_flag=True, default=False)
@click.option("--epoch", default=0, show_default=True, help="Record label.")
@click.option(
    "--out", type=click.Path(file_okay=False, path_type=Path), required=True
)
@click.pass_context
def ratios(ctx: click.Context, **params: Any) -> None:
    """Record and export per-sample ratios of a trained EN model."""
    out: Path = params["out"]
    with _exit_codes(ctx):
        model = load_checkpoint(params["checkpoint"])
        source = _parse_source(
            params["data"],
            params["classes"],
            params["per_class"],
            params["image_size"],
            params["seed"],
            params["subset"],
        )
        data = load_source(source, model.dtype.type)
        records = record_ratios(model, data, params["epoch"])

        out.mkdir(parents=True, exist_ok=True)
        artifacts = {"records": "ratios.csv", "aggregates": "aggregates.json"}
        export_records(records, out / artifacts["records"])
        export_aggregates(
            aggregate(records, Grouping(params["group"])),
            out / artifacts["aggregates"],
        )
        if params["concat"]:
            artifacts["vectors"] = "vectors.csv"
            vectors = sample_vectors(records, len(model.en_layers()))
            export_vectors(vectors, out / artifacts["vectors"])
        _finish("ratios", params, out, artifacts)
    click.echo(f"{len(records)} ratio records written to {out}")

