"""Command line surface: build, stats, eval, validate and the toy-model demos.

Results go to stdout (or ``--output``); diagnostics go to stderr. Exit codes
are 0 on success, 2 on input or validation errors and 3 when negative
generation is exhausted.
"""

from collections import Counter
from pathlib import Path
from typing import List, Optional

import numpy as np
import typer

from rris.config import GenerationConfig, RunConfig, build_run_config, load_model_config
from rris.dataset import build_robust_split, compute_stats, default_fixture_path, deserialize, find_invalid_negatives, load_annotations, serialize
from rris.errors import EXIT_INPUT, DatasetError, RrisError
from rris.logging import logger, set_verbose
from rris.predictions import POLICIES, dump_predictions, evaluate_predictions, load_predictions, synthesize_predictions
from rris.toy.gradcheck import check_model_gradients
from rris.toy.layers import attention_row_error, param_count
from rris.toy.model import forward, init_params, predict_mask, trace_to_json
from rris.toy.prompt import text_prompt_concat, token_ids
from rris.toy.train import synthetic_batch, train
from rris.utils import canonical_json, write_json

app = typer.Typer(add_completion=False, help="Robust referring segmentation benchmark toolkit.")

InputOption = typer.Option(None, "--input", "-i", help="Input JSON file")
OutputOption = typer.Option(None, "--output", "-o", help="Write the result here instead of stdout")
SeedOption = typer.Option(None, "--seed", help="Master seed (default: $RRIS_SEED or 0)")
JsonOption = typer.Option(False, "--json", help="Machine-readable output")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Log progress at INFO level")
ModelConfigOption = typer.Option(None, "--model-config", help="Toy model config JSON")


def _config(**options) -> RunConfig:
    set_verbose(options.get("verbose", False))
    if options.get("seed") is None:
        options.pop("seed", None)
    return build_run_config(**options)


def _fail(error: RrisError):
    logger.info(f"{type(error).__name__}: {error}")
    typer.echo(f"error: {error}", err=True)
    raise typer.Exit(code=error.exit_code)


def _emit(data: dict, output: Optional[Path], text: Optional[str], as_json: bool):
    """Write ``data`` to ``output`` when given; print JSON or the text view."""
    if output is not None:
        write_json(data, output)
    if as_json or text is None:
        if output is None:
            typer.echo(canonical_json(data), nl=False)
    else:
        typer.echo(text)


def _parse_thresholds(raw: str) -> List[float]:
    try:
        return [float(t) for t in raw.split(",") if t.strip()]
    except ValueError:
        raise DatasetError(f"thresholds must be comma-separated numbers, got {raw!r}", code="invalid-options")


@app.command()
def build(
    input: Optional[Path] = InputOption,
    output: Optional[Path] = OutputOption,
    seed: Optional[int] = SeedOption,
    mode: str = typer.Option(
        "val", "--mode", help="Count rule for every reference. train: one negative per positive; val: a fixed count"
    ),
    negatives_per_ref: int = typer.Option(10, "--negatives-per-ref"),
    exclude_absolute_positions: bool = typer.Option(
        False, "--exclude-absolute-positions", help="Drop absolute position words from generation"
    ),
    as_json: bool = JsonOption,
    verbose: bool = VerboseOption,
):
    """Generate negative sentences for one split and write the robust dataset."""
    try:
        config = _config(
            subcommand="build",
            input=input or default_fixture_path(),
            output=output,
            seed=seed,
            mode=mode,
            negatives_per_ref=negatives_per_ref,
            as_json=as_json,
            verbose=verbose,
        )
        generation = GenerationConfig(
            negatives_per_ref=config.negatives_per_ref,
            exclude_absolute_positions=exclude_absolute_positions,
        )
        dataset = load_annotations(config.input)
        robust = build_robust_split(dataset, config.mode, config.seed, config=generation, progress=config.verbose)
    except RrisError as e:
        _fail(e)

    if config.output is None:
        typer.echo(canonical_json(robust.to_json()), nl=False)
        return
    try:
        serialize(robust, config.output)
    except RrisError as e:
        _fail(e)

    counts = Counter(negative.strategy.value for ref in robust.references for negative in ref.negatives)
    summary = {"split": config.mode, "references": len(robust.references), "strategies": dict(sorted(counts.items()))}
    lines = [f"{config.mode}: {len(robust.references)} references -> {config.output}"]
    lines += [f"  {name:<16} {count:>6}" for name, count in sorted(counts.items())]
    _emit(summary, None, "\n".join(lines), config.as_json)


@app.command()
def stats(
    input: Path = typer.Option(..., "--input", "-i", help="Robust dataset JSON"),
    output: Optional[Path] = OutputOption,
    as_json: bool = JsonOption,
    verbose: bool = VerboseOption,
):
    """Reference counts and sentences per reference, per split."""
    try:
        config = _config(subcommand="stats", input=input, output=output, as_json=as_json, verbose=verbose)
        result = compute_stats(deserialize(config.input))
        _emit(result.to_json(), config.output, result.format_table(), config.as_json)
    except RrisError as e:
        _fail(e)


@app.command(name="eval")
def evaluate(
    input: Path = typer.Option(..., "--input", "-i", help="Robust dataset JSON"),
    predictions: Path = typer.Option(..., "--predictions", "-p", help="Predictions JSON"),
    output: Optional[Path] = OutputOption,
    thresholds: str = typer.Option("0.5,0.7,0.9", "--thresholds", help="Comma-separated Precision@X thresholds"),
    as_json: bool = JsonOption,
    verbose: bool = VerboseOption,
):
    """Score predictions with rIoU, mRR, mIoU, oIoU, Precision@X and R."""
    try:
        config = _config(
            subcommand="eval",
            input=input,
            predictions=predictions,
            output=output,
            thresholds=_parse_thresholds(thresholds),
            as_json=as_json,
            verbose=verbose,
        )
        robust = deserialize(config.input)
        report = evaluate_predictions(robust, load_predictions(config.predictions), config.thresholds)
        _emit(report.to_json(), config.output, report.format_table(), config.as_json)
    except RrisError as e:
        _fail(e)


@app.command()
def validate(
    input: Path = typer.Option(..., "--input", "-i", help="Robust dataset JSON"),
    as_json: bool = JsonOption,
    verbose: bool = VerboseOption,
):
    """Re-check every negative sentence; exit 2 when any fails."""
    try:
        config = _config(subcommand="validate", input=input, as_json=as_json, verbose=verbose)
        robust = deserialize(config.input)
        issues = find_invalid_negatives(robust)
    except RrisError as e:
        _fail(e)

    checked = sum(len(ref.negatives) for ref in robust.references)
    if config.as_json:
        typer.echo(canonical_json({"checked": checked, "issues": [i.model_dump() for i in issues]}), nl=False)
    else:
        for issue in issues:
            typer.echo(f"ref {issue.ref_id}: {issue.text!r}: {issue.reason}")
        typer.echo(f"{checked} negatives checked, {len(issues)} invalid")
    if issues:
        raise typer.Exit(code=EXIT_INPUT)


@app.command(name="synth-predictions")
def synth_predictions(
    input: Path = typer.Option(..., "--input", "-i", help="Robust dataset JSON"),
    output: Path = typer.Option(..., "--output", "-o"),
    policy: str = typer.Option("perfect", "--policy", help=f"One of {', '.join(POLICIES)}"),
    seed: Optional[int] = SeedOption,
    verbose: bool = VerboseOption,
):
    """Write stand-in predictions for end-to-end evaluation runs."""
    try:
        config = _config(subcommand="synth-predictions", input=input, output=output, seed=seed, verbose=verbose)
        robust = deserialize(config.input)
        dump_predictions(synthesize_predictions(robust, policy, config.seed), config.output)
    except RrisError as e:
        _fail(e)
    logger.info(f"Wrote {policy} predictions to {config.output}")


@app.command(name="demo-model")
def demo_model(
    model_config: Optional[Path] = ModelConfigOption,
    output: Optional[Path] = OutputOption,
    seed: Optional[int] = SeedOption,
    train_steps: int = typer.Option(0, "--train-steps", min=0, help="Gradient steps on synthetic data"),
    text: Optional[List[str]] = typer.Option(
        None, "--text", help="Expression fed with every image; repeat to concatenate sentences"
    ),
    as_json: bool = JsonOption,
    verbose: bool = VerboseOption,
):
    """Run the toy fusion model on synthetic input and dump its trace."""
    try:
        config = _config(
            subcommand="demo-model", toy_config=model_config, output=output, seed=seed, as_json=as_json, verbose=verbose
        )
        model = load_model_config(config.toy_config)
        params = init_params(model)
        losses = train(model, train_steps, seed=config.seed, params=params, progress=config.verbose) if train_steps else []
        batch = synthetic_batch(model, pairs=1, seed=config.seed)
        ids = batch.token_ids
        prompt = None
        if text:
            prompt = text_prompt_concat(text, model.max_text_len)
            ids = np.tile(token_ids(prompt.text, model.vocab_size, model.max_text_len), (len(batch.images), 1))
        trace = forward(params, model, batch.images, ids)
    except RrisError as e:
        _fail(e)

    dump = trace_to_json(trace)
    dump["losses"] = losses
    dump["param_count"] = param_count(params)
    dump["prompt"] = prompt.text if prompt else None
    row_error = attention_row_error([a.value for a in trace.attention.values()])
    lines = [f"parameters: {dump['param_count']}"]
    if prompt:
        lines.append(f"prompt: {prompt.text}")
    lines.append(f"e_hat: {', '.join(f'{e:.6f}' for e in np.ravel(trace.e_hat.value))}")
    lines += [f"mask area (sample {i}): {int(predict_mask(trace, i).bits.sum())}" for i in range(len(batch.exists))]
    lines.append(f"max attention row-sum error: {row_error:.3e}")
    lines += [f"step {i}: loss {loss:.6f}" for i, loss in enumerate(losses)]
    try:
        _emit(dump, config.output, "\n".join(lines), config.as_json)
    except RrisError as e:
        _fail(e)


@app.command()
def gradcheck(
    model_config: Optional[Path] = ModelConfigOption,
    seed: Optional[int] = SeedOption,
    samples: int = typer.Option(100, "--samples", min=1, help="Number of sampled parameters"),
    corrupt: bool = typer.Option(False, "--corrupt", hidden=True, help="Skew analytic gradients (harness self-test)"),
    as_json: bool = JsonOption,
    verbose: bool = VerboseOption,
):
    """Compare reverse-mode gradients with central differences; exit 2 on failure."""
    try:
        config = _config(subcommand="gradcheck", toy_config=model_config, seed=seed, as_json=as_json, verbose=verbose)
        report = check_model_gradients(load_model_config(config.toy_config), samples, config.seed, corrupt)
    except RrisError as e:
        _fail(e)

    status = "PASS" if report.passed else "FAIL"
    text = (
        f"{status}: max relative error {report.max_rel_error:.3e} (tol {report.tol:.0e}, "
        f"{report.samples} samples over {report.groups} groups, worst {report.worst_param})"
    )
    _emit(report.model_dump(), None, text, config.as_json)
    if not report.passed:
        raise typer.Exit(code=EXIT_INPUT)


def main():
    app()
