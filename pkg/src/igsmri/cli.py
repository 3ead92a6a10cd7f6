"""Command-line front end: data generation, head training, pattern search, evaluation.

Every command writes a ``<output>.manifest`` file next to its primary output.
``igsmri replay --manifest FILE`` re-runs the recorded command.

Exit codes: 0 success, 2 bad arguments, 3 data errors, 4 numeric failures.
"""

from __future__ import annotations

import functools
import hashlib
import io
import logging
import math
import shlex
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .heads import HeadKind, classifier_from_segmenter, init_head, train_head
from .igs import IgsConfig, NumericError, igs_run
from .phantom import kfold_partition, make_set
from .sampling import SamplingPattern, apply_pattern, lines_budget
from .store import (
    StoreError,
    atomic_write,
    pattern_image,
    read_dataset,
    read_head,
    read_pattern,
    write_dataset,
    write_head,
    write_pattern,
    write_pgm,
)
from .tasks import (
    METRIC_COLUMNS,
    Task,
    baseline_pattern,
    evaluate,
    finetune,
    resolve_head,
    task_targets,
)

logger = logging.getLogger("igsmri")

EXIT_BAD_ARGS = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TASKS = [t.value for t in Task]
GENERATORS = ("center", "equispaced", "fastmri")


class DataError(click.ClickException):
    exit_code = EXIT_DATA


class NumericFailure(click.ClickException):
    exit_code = EXIT_NUMERIC


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.iterdir() if p.is_file()):
            h.update(child.name.encode())
            h.update(child.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


class Run:
    """Collects what a command read and wrote, then emits its manifest."""

    def __init__(self, command: str, seed: int | None):
        self.command = command
        self.seed = seed
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.start = time.perf_counter()

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise DataError(f"input not found: {path}")
        self.inputs.append(path)
        return path

    def wrote(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def finish(self, manifest_path: Path) -> None:
        ctx = click.get_current_context()
        argv = [self.command] + _recorded_args(ctx)
        lines = [
            f"command={self.command}",
            f"args={shlex.join(argv)}",
        ]
        for name, value in sorted(ctx.params.items()):
            lines.append(f"flag.{name}={_flag_text(value)}")
        lines.append(f"seed={'' if self.seed is None else self.seed}")
        for path in self.inputs:
            lines.append(f"input.{path}={_sha256(path)}")
        for path in self.outputs:
            lines.append(f"output.{path}={_sha256(path)}")
        lines.append(f"version={__version__}")
        lines.append(f"duration_s={time.perf_counter() - self.start:.3f}")
        atomic_write(manifest_path, ("\n".join(lines) + "\n").encode("utf-8"))


def _flag_text(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return "" if value is None else str(value)


def _recorded_args(ctx: click.Context) -> list[str]:
    """Rebuild a canonical long-form argument list from parsed parameters."""
    args: list[str] = []
    for param in ctx.command.params:
        if not isinstance(param, click.Option):
            continue
        value = ctx.params.get(param.name)
        flag = max(param.opts, key=len)
        if param.is_flag:
            if param.secondary_opts:
                args.append(flag if value else max(param.secondary_opts, key=len))
            elif value:
                args.append(flag)
        elif param.multiple:
            for item in value or ():
                args += [flag, str(item)]
        elif value is not None:
            args += [flag, str(value)]
    return args


def guarded(fn):
    """Map library errors to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (NumericError, FloatingPointError) as exc:
            raise NumericFailure(str(exc)) from exc
        except (StoreError, OSError, ValueError, KeyError) as exc:
            raise DataError(str(exc)) from exc

    return wrapper


def _load_data(run: Run, directory: str):
    path = run.read(directory)
    data = read_dataset(path)
    return data


def _load_head(run: Run, task: Task, head_path: str | None):
    if not task.needs_head:
        if head_path is not None:
            raise click.BadParameter(f"task {task.value} takes no head", param_hint="--head")
        return None
    if head_path is None:
        raise click.BadParameter(f"task {task.value} requires a trained head",
                                 param_hint="--head")
    head = read_head(run.read(head_path))
    try:
        return resolve_head(task, head)
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--head") from None


def _check_accel(accel: float) -> None:
    if not accel >= 1.0 or not math.isfinite(accel):
        raise click.BadParameter(f"acceleration must be >= 1, got {accel}", param_hint="--accel")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".10g")


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(row) + "\n")
    return buf.getvalue().encode("ascii")


jobs_option = click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
                           help="Worker threads; results do not depend on this.")
seed_option = click.option("--seed", type=int, default=0, show_default=True,
                           help="Single source of all randomness.")
task_option = click.option("--task", type=click.Choice(TASKS), required=True)


@click.group()
@click.version_option(__version__, "--version")
@click.option("--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Task-driven k-space line selection for undersampled MRI."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


# -- data -----------------------------------------------------------------------


@main.command("phantom-gen")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--count", type=click.IntRange(min=1), required=True)
@click.option("--size", type=click.IntRange(min=16), default=64, show_default=True)
@click.option("--lesion-prob", type=click.FloatRange(0.0, 1.0), default=0.5, show_default=True)
@click.option("--noise", type=click.FloatRange(min=0.0), default=0.01, show_default=True)
@seed_option
@guarded
def phantom_gen(out_dir, count, size, lesion_prob, noise, seed):
    """Generate a phantom dataset directory."""
    run = Run("phantom-gen", seed)
    data = make_set(count, size, seed, lesion_prob, noise)
    write_dataset(out_dir, data, {"seed": seed, "lesion_prob": lesion_prob, "noise": noise})
    for name in ("images.igsd", "masks.igsd", "dataset.txt"):
        run.wrote(Path(out_dir) / name)
    run.finish(Path(out_dir) / "run.manifest")
    click.echo(f"wrote {count} phantoms to {out_dir}")


# -- heads ----------------------------------------------------------------------


@main.command("head-train")
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--task", type=click.Choice(["seg", "cls"]), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--epochs", type=click.IntRange(min=1), default=60, show_default=True)
@click.option("--batch", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0.0, min_open=True), default=0.001,
              show_default=True)
@click.option("--channels", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--kernel", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--init-from", type=click.Path(dir_okay=False), default=None,
              help="Start from this head; a segmenter seeds a classifier's trunk.")
@click.option("--pattern", "pattern_path", type=click.Path(dir_okay=False), default=None,
              help="Fine-tune on images undersampled by this pattern.")
@click.option("--val-data", type=click.Path(), default=None)
@click.option("--patience", type=click.IntRange(min=1), default=None,
              help="Early stop after this many epochs without validation gain.")
@click.option("--history-out", type=click.Path(dir_okay=False), default=None)
@seed_option
@guarded
def head_train(data_dir, task, out_path, epochs, batch, lr, channels, kernel, init_from,
               pattern_path, val_data, patience, history_out, seed):
    """Train (or fine-tune) a segmenter or classifier head."""
    run = Run("head-train", seed)
    task = Task(task)
    if patience is not None and val_data is None:
        raise click.BadParameter("--patience needs --val-data", param_hint="--patience")
    data = _load_data(run, data_dir)
    if init_from is not None:
        head = read_head(run.read(init_from))
        if task is Task.CLS and head.kind is HeadKind.SEGMENTER:
            head = classifier_from_segmenter(head)
        elif head.kind is not task.head_kind:
            raise click.BadParameter(f"cannot start a {task.head_kind.value} from a "
                                     f"{head.kind.value} head", param_hint="--init-from")
    else:
        head = init_head(task.head_kind, seed, channels, kernel)
    transform = None
    if pattern_path is not None:
        pattern = read_pattern(run.read(pattern_path))
        transform = functools.partial(apply_pattern, pat=pattern)
    val = None
    if val_data is not None:
        vset = _load_data(run, val_data)
        val = (vset.images, task_targets(task, vset))
    result = train_head(head, data.images, task_targets(task, data), task.loss,
                        epochs=epochs, batch=batch, seed=seed, lr=lr, val=val,
                        patience=patience, transform=transform)
    write_head(out_path, result.head)
    run.wrote(out_path)
    run.wrote(out_path + ".txt")
    if history_out is not None:
        rows = []
        for i, value in enumerate(result.losses):
            vloss = result.val_losses[i] if i < len(result.val_losses) else None
            rows.append([str(i), _fmt(value), _fmt(vloss)])
        atomic_write(history_out, _csv(["epoch", "train_loss", "val_loss"], rows))
        run.wrote(history_out)
    run.finish(Path(out_path + ".manifest"))
    click.echo(f"trained {result.head.kind.value} head for {len(result.losses)} epochs "
               f"(final loss {result.losses[-1]:.6f})")


# -- search ---------------------------------------------------------------------


@main.command()
@task_option
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--accel", type=float, required=True, help="Acceleration factor N / budget.")
@click.option("--head", "head_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None)
@click.option("--batch-limit", type=click.IntRange(min=1), default=None,
              help="Use this many evenly spaced samples per gradient pass.")
@jobs_option
@seed_option
@guarded
def optimize(task, data_dir, accel, head_path, out_path, trace_path, batch_limit, jobs, seed):
    """Search an undersampling pattern with iterative gradient sampling."""
    run = Run("optimize", seed)
    task = Task(task)
    _check_accel(accel)
    data = _load_data(run, data_dir)
    head = resolve_head(task, _load_head(run, task, head_path))
    width = data.images.shape[-1]
    config = IgsConfig(lines_budget(width, accel), task.loss, head,
                       batch_limit=batch_limit, jobs=jobs)
    pattern, trace = igs_run(data.images, task_targets(task, data), config)
    write_pattern(out_path, pattern)
    run.wrote(out_path)
    if trace_path is not None:
        atomic_write(trace_path, trace.to_csv().encode("ascii"))
        run.wrote(trace_path)
    run.finish(Path(out_path + ".manifest"))
    click.echo(f"selected {pattern.cardinality}/{width} lines: {list(pattern.transition_log)}")


# -- evaluation -----------------------------------------------------------------


def _summary_cells(summary: dict) -> list[str]:
    return [_fmt(summary.get(c)) for c in METRIC_COLUMNS]


def _fold_rows(task, data, train, pattern, head, folds, finetune_epochs, batch, seed, jobs):
    """Per-fold summaries; with fine-tuning the head trains on the other folds."""
    summaries = []
    for k, (train_idx, val_idx) in enumerate(kfold_partition(len(data), folds)):
        fold_head = head
        if head is not None and finetune_epochs > 0:
            source = train if train is not None else data.subset(train_idx)
            fold_head = finetune(head, task, source, pattern, finetune_epochs, batch, seed + k)
        summaries.append(evaluate(task, data.subset(val_idx), pattern, fold_head, jobs).summary)
    return summaries


def _mean_std_rows(summaries) -> tuple[dict, dict]:
    mean, std = {}, {}
    for col in METRIC_COLUMNS:
        vals = [s[col] for s in summaries if col in s]
        if vals:
            mean[col] = float(np.mean(vals))
            std[col] = float(np.std(vals))
    return mean, std


def _tuned_head(task, head, train, pattern, finetune_epochs, batch, seed):
    if head is None or finetune_epochs == 0:
        return head
    if train is None:
        raise click.BadParameter("--finetune-epochs needs --train-data",
                                 param_hint="--finetune-epochs")
    return finetune(head, task, train, pattern, finetune_epochs, batch, seed)


finetune_options = [
    click.option("--finetune-epochs", type=click.IntRange(min=0), default=0, show_default=True,
                 help="Retrain the head on pattern-undersampled training images first."),
    click.option("--train-data", type=click.Path(), default=None,
                 help="Training set for fine-tuning."),
    click.option("--batch", type=click.IntRange(min=1), default=8, show_default=True),
    click.option("--folds", type=click.IntRange(min=2), default=None,
                 help="k-fold evaluation with per-fold and mean/std rows."),
]


def with_options(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return deco


@main.command("eval")
@click.option("--pattern", "pattern_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@task_option
@click.option("--head", "head_path", type=click.Path(dir_okay=False), default=None)
@click.option("--metrics-out", type=click.Path(dir_okay=False), required=True)
@with_options(finetune_options)
@jobs_option
@seed_option
@guarded
def eval_cmd(pattern_path, data_dir, task, head_path, metrics_out, finetune_epochs,
             train_data, batch, folds, jobs, seed):
    """Score one pattern: per-sample and mean metrics as CSV."""
    run = Run("eval", seed)
    task = Task(task)
    pattern = read_pattern(run.read(pattern_path))
    data = _load_data(run, data_dir)
    head = _load_head(run, task, head_path)
    train = _load_data(run, train_data) if train_data is not None else None
    header = ["row"] + list(METRIC_COLUMNS)
    rows = []
    if folds is not None:
        summaries = _fold_rows(task, data, train, pattern, head, folds, finetune_epochs,
                               batch, seed, jobs)
        for k, s in enumerate(summaries):
            rows.append([f"fold{k}"] + _summary_cells(s))
        mean, std = _mean_std_rows(summaries)
        rows.append(["mean"] + _summary_cells(mean))
        rows.append(["std"] + _summary_cells(std))
    else:
        head = _tuned_head(task, head, train, pattern, finetune_epochs, batch, seed)
        result = evaluate(task, data, pattern, head, jobs)
        for i, r in enumerate(result.rows):
            rows.append([str(i)] + [_fmt(r.get(c)) for c in METRIC_COLUMNS])
        rows.append(["mean"] + _summary_cells(result.summary))
    atomic_write(metrics_out, _csv(header, rows))
    run.wrote(metrics_out)
    run.finish(Path(metrics_out + ".manifest"))
    click.echo(f"wrote {len(rows)} rows to {metrics_out}")


def _task_metric(task: Task) -> str:
    return {Task.SEG: "dice", Task.CLS: "f1"}.get(task, "ssim")


@main.command()
@click.option("--pattern", "pattern_paths", type=click.Path(dir_okay=False), multiple=True,
              help="Pattern file (repeatable).")
@click.option("--generator", "generators", type=click.Choice(GENERATORS), multiple=True,
              help="Baseline generated at every --accel (repeatable).")
@click.option("--accel", "accels", type=float, multiple=True,
              help="Acceleration for generated baselines (repeatable).")
@click.option("--data", "data_dir", type=click.Path(), required=True)
@task_option
@click.option("--head", "head_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--sweep-out", type=click.Path(dir_okay=False), default=None,
              help="Task metric vs SSIM table per pattern and acceleration.")
@click.option("--render-dir", type=click.Path(file_okay=False), default=None,
              help="Write a PGM of each pattern and of one reconstruction.")
@with_options(finetune_options)
@jobs_option
@seed_option
@guarded
def compare(pattern_paths, generators, accels, data_dir, task, head_path, out_path, sweep_out,
            render_dir, finetune_epochs, train_data, batch, folds, jobs, seed):
    """Tabulate metrics for several patterns side by side."""
    run = Run("compare", seed)
    task = Task(task)
    for accel in accels:
        _check_accel(accel)
    if generators and not accels:
        raise click.BadParameter("generated baselines need at least one --accel",
                                 param_hint="--generator")
    data = _load_data(run, data_dir)
    head = _load_head(run, task, head_path)
    train = _load_data(run, train_data) if train_data is not None else None
    width = data.images.shape[-1]
    entries: list[tuple[str, float, SamplingPattern]] = []
    for path in pattern_paths:
        pat = read_pattern(run.read(path))
        entries.append((Path(path).stem, width / pat.cardinality, pat))
    for name in generators:
        for accel in accels:
            entries.append((name, accel, baseline_pattern(name, width, accel, seed)))
    if len(entries) < 2:
        raise click.BadParameter("need at least two patterns to compare",
                                 param_hint="--pattern/--generator")
    header = ["pattern", "accel", "budget", "row"] + list(METRIC_COLUMNS)
    rows, sweep = [], []
    for label, accel, pat in entries:
        prefix = [label, _fmt(accel), str(pat.cardinality)]
        if folds is not None:
            summaries = _fold_rows(task, data, train, pat, head, folds, finetune_epochs,
                                   batch, seed, jobs)
            for k, s in enumerate(summaries):
                rows.append(prefix + [f"fold{k}"] + _summary_cells(s))
            summary, std = _mean_std_rows(summaries)
            rows.append(prefix + ["mean"] + _summary_cells(summary))
            rows.append(prefix + ["std"] + _summary_cells(std))
        else:
            tuned = _tuned_head(task, head, train, pat, finetune_epochs, batch, seed)
            summary = evaluate(task, data, pat, tuned, jobs).summary
            rows.append(prefix + ["mean"] + _summary_cells(summary))
        metric = _task_metric(task)
        sweep.append(prefix + [_fmt(summary["ssim"]), metric, _fmt(summary.get(metric))])
        if render_dir is not None:
            out = Path(render_dir)
            out.mkdir(parents=True, exist_ok=True)
            tag = f"{label}_x{_fmt(accel)}"
            write_pgm(out / f"{tag}_pattern.pgm", pattern_image(pat))
            write_pgm(out / f"{tag}_recon.pgm", apply_pattern(data.images[0], pat))
            run.wrote(out / f"{tag}_pattern.pgm")
            run.wrote(out / f"{tag}_recon.pgm")
    atomic_write(out_path, _csv(header, rows))
    run.wrote(out_path)
    if sweep_out is not None:
        atomic_write(sweep_out, _csv(["pattern", "accel", "budget", "ssim", "metric", "value"],
                                     sweep))
        run.wrote(sweep_out)
    run.finish(Path(out_path + ".manifest"))
    click.echo(f"compared {len(entries)} patterns; table in {out_path}")


# -- rendering ------------------------------------------------------------------


@main.command()
@click.option("--pattern", "pattern_path", type=click.Path(dir_okay=False), default=None)
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--index", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--what", type=click.Choice(["pattern", "image", "recon", "mask"]),
              default="pattern", show_default=True)
@click.option("--normalize", is_flag=True, help="Min-max normalize before quantizing.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@guarded
def render(pattern_path, data_dir, index, what, normalize, out_path):
    """Write a pattern, phantom, mask or zero-filled reconstruction as PGM."""
    run = Run("render", None)
    pattern = read_pattern(run.read(pattern_path)) if pattern_path else None
    if what in ("pattern", "recon") and pattern is None:
        raise click.BadParameter(f"--what {what} needs --pattern", param_hint="--pattern")
    if what != "pattern":
        if data_dir is None:
            raise click.BadParameter(f"--what {what} needs --data", param_hint="--data")
        data = _load_data(run, data_dir)
        if index >= len(data):
            raise click.BadParameter(f"index {index} outside dataset of {len(data)}",
                                     param_hint="--index")
    if what == "pattern":
        img = pattern_image(pattern)
    elif what == "image":
        img = data.images[index]
    elif what == "mask":
        img = data.masks[index].astype(np.float64)
    else:
        img = apply_pattern(data.images[index], pattern)
    write_pgm(out_path, img, normalize)
    run.wrote(out_path)
    run.finish(Path(out_path + ".manifest"))
    click.echo(f"wrote {out_path}")


# -- replay ---------------------------------------------------------------------


def read_manifest(path) -> dict[str, str]:
    fields = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            fields[key] = value
    return fields


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(dir_okay=False, exists=True),
              required=True)
@click.option("--jobs", type=click.IntRange(min=1), default=None,
              help="Override the recorded worker count.")
def replay(manifest_path, jobs):
    """Re-run the command recorded in a manifest."""
    fields = read_manifest(manifest_path)
    if "args" not in fields:
        raise DataError(f"{manifest_path}: no recorded arguments")
    argv = shlex.split(fields["args"])
    if jobs is not None:
        if "--jobs" not in argv:
            raise click.BadParameter(f"{argv[0]} takes no --jobs", param_hint="--jobs")
        argv[argv.index("--jobs") + 1] = str(jobs)
    ctx = click.get_current_context()
    command = main.get_command(ctx, argv[0])
    if command is None:
        raise DataError(f"{manifest_path}: unknown command {argv[0]!r}")
    with command.make_context(argv[0], argv[1:], parent=ctx.parent) as sub:
        command.invoke(sub)


if __name__ == "__main__":
    main()
