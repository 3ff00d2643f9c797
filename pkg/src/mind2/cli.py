"""Command-line entry points for the full pipeline: ingest, split, extract,
linearize, eval, run, ablate, sweep, report, serve."""

from __future__ import annotations

import json
import os
from pathlib import Path

import click

from . import bck, corpus, linearize, metrics, report, runner
from .backend import ENV_BACKEND_URL, resolve_backend
from .discourse import DEFAULT_SPAN


def _default_backend() -> str:
    return os.environ.get(ENV_BACKEND_URL, "mock")


def _load_corpus(path: str):
    return runner.load_corpus(path)


def _sampled_split(conversations, fraction, seed, stratify=False):
    split = corpus.standard_split(conversations, seed)
    return corpus.sample_split(split, fraction, seed, stratify=stratify)


@click.group()
def main():
    """Emotional-support dialogue toolkit."""


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True),
              help="Source ESConv JSON array.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Normalized corpus JSONL destination.")
def ingest(in_path, out_path):
    """Normalize a source corpus into the internal JSONL format."""
    conversations = corpus.load_esconv(in_path)
    corpus.save_jsonl(conversations, out_path)
    click.echo(f"wrote {len(conversations)} conversations -> {out_path}")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--fraction", default=1.0, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--stratify", is_flag=True, help="Stratify sampling by problem type.")
def split(in_path, out_dir, fraction, seed, stratify):
    """Produce the 70/15/15 partition and a seeded training sample."""
    conversations = _load_corpus(in_path)
    sampled = _sampled_split(conversations, fraction, seed, stratify)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        part = list(getattr(sampled, name))
        corpus.save_jsonl(part, out / f"{name}.jsonl")
        click.echo(f"{name}: {len(part)} conversations")
    (out / "split.json").write_text(json.dumps({
        "fraction": fraction,
        "seed": seed,
        "stratify": stratify,
        "train_ids": [c.id for c in sampled.train],
        "validation_ids": [c.id for c in sampled.validation],
        "test_ids": [c.id for c in sampled.test],
    }, indent=2) + "\n", encoding="utf-8")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--split", "part", default="train", show_default=True,
              type=click.Choice(["train", "validation", "test"]))
@click.option("--fraction", default=1.0, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--window-span", default=DEFAULT_SPAN, show_default=True)
@click.option("--backend", "backend_spec", default=None,
              help="'mock' or a chat-completion URL (default: env or mock).")
@click.option("--cache", "cache_path", required=True, type=click.Path())
@click.option("--concurrency", default=1, show_default=True)
def extract(in_path, part, fraction, seed, window_span, backend_spec,
            cache_path, concurrency):
    """Extract cognitive knowledge for every utterance of a split part."""
    conversations = _load_corpus(in_path)
    sampled = _sampled_split(conversations, fraction, seed)
    backend = resolve_backend(backend_spec or _default_backend(), "extraction")
    store = bck.extract_corpus(sampled, window_span, backend, cache_path,
                               part=part, concurrency=concurrency)
    click.echo(f"extracted {len(store)} triplets "
               f"({len(store.records())} component records) -> {cache_path}")
    stats = store.term_stats()
    for component, buckets in stats.items():
        overall = buckets.get("overall", 0.0)
        click.echo(f"  {component}: {overall:.1%} extractions with terms")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--cache", "cache_path", required=True, type=click.Path(exists=True))
@click.option("--split", "part", default="train", show_default=True,
              type=click.Choice(["train", "validation", "test"]))
@click.option("--fraction", default=1.0, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--window-span", default=DEFAULT_SPAN, show_default=True)
@click.option("--mask", default="btm,peu,bcr", show_default=True,
              help="Included components, e.g. 'btm,peu' or 'none'.")
@click.option("--budget", default=256, show_default=True,
              help="Whitespace-token budget for the input sequence.")
@click.option("--out", "out_path", required=True, type=click.Path())
def linearize_cmd(in_path, cache_path, part, fraction, seed, window_span,
                  mask, budget, out_path):
    """Export linearized training records (one per supporter turn)."""
    conversations = _load_corpus(in_path)
    sampled = _sampled_split(conversations, fraction, seed)
    part_convs = list(getattr(sampled, part))
    # Assembling from the cache alone: a no-call backend guarantees we only
    # ever read previously extracted records.
    store = bck.extract_conversations(part_convs, window_span,
                                      _refusing_backend(), cache_path)
    mask_obj = linearize.AblationMask.from_names(mask)
    count = linearize.export_training_jsonl(part_convs, store, mask_obj,
                                            out_path, budget=budget)
    click.echo(f"wrote {count} records -> {out_path}")


main.add_command(linearize_cmd, name="linearize")


def _refusing_backend():
    from .backend import Backend

    class RefusingBackend(Backend):
        name = "cache-only"

        def complete(self, prompt, config, want_logprobs=False):
            raise click.ClickException(
                "cache is missing extractions for this split; run `extract` first"
            )

    return RefusingBackend()


@main.command("eval")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_cmd(pred_path, ref_path, out_path):
    """Score predictions against references, paired by (conversation, turn)."""
    preds = _read_rows(pred_path)
    refs = {(r["conversation_id"], r["turn"]): r for r in _read_rows(ref_path)}
    pairs = []
    for row in preds:
        key = (row["conversation_id"], row["turn"])
        if key not in refs:
            raise click.ClickException(f"no reference for {key}")
        ref = refs[key]
        pairs.append(metrics.EvalPair(
            generated=(corpus.Strategy.parse(row["strategy"]), row["response"]),
            reference=(corpus.Strategy.parse(ref["strategy"]), ref["response"]),
            conversation_id=row["conversation_id"],
            turn=row["turn"],
        ))
    result = metrics.evaluate(pairs)
    click.echo(report.format_table([("eval", result)]))
    if out_path:
        Path(out_path).write_text(
            json.dumps(result.to_dict(), indent=2) + "\n", encoding="utf-8")
        click.echo(f"wrote {out_path}")


def _read_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
def run(spec_path):
    """Execute one experiment from a serialized run spec."""
    spec = runner.RunSpec.from_file(spec_path)
    artifacts = runner.run_generation(spec)
    click.echo(report.format_table([(spec.mask.label(), artifacts.report)]))
    click.echo(f"artifacts in {artifacts.output_dir}")


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--masks", default="all", show_default=True,
              help="'all' for the standard 7-way grid, or ';'-separated "
                   "component lists like 'btm,peu;btm;none'.")
def ablate(spec_path, masks):
    """Run the component ablation grid over a shared extraction cache."""
    spec = runner.RunSpec.from_file(spec_path)
    if masks == "all":
        grid = None
    else:
        grid = [linearize.AblationMask.from_names(part)
                for part in masks.split(";") if part.strip()]
    result = runner.run_ablation_grid(spec, grid)
    click.echo(report.format_table(result.rows, label_header="Knowledge"))


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--fractions", default="0.10,0.25,0.50,0.75,1.0",
              show_default=True)
def sweep(spec_path, fractions):
    """Run the training-fraction sweep with nested seeded samples."""
    spec = runner.RunSpec.from_file(spec_path)
    values = [float(v) for v in fractions.split(",") if v.strip()]
    result = runner.run_fraction_sweep(spec, values)
    click.echo(report.format_sweep_table(result))


@main.command("report")
@click.option("--dir", "run_dir", required=True, type=click.Path(exists=True))
def report_cmd(run_dir):
    """Render CSV summaries and figures for every report under a directory."""
    written = report.generate_report_bundle(run_dir)
    for path in written:
        click.echo(f"wrote {path}")
    if not written:
        click.echo("no report artifacts found")


@main.command()
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--backend", "backend_spec", default=None,
              help="'mock' or a chat-completion URL (default: env or mock).")
@click.option("--data-dir", default=None, type=click.Path())
@click.option("--window-span", default=DEFAULT_SPAN, show_default=True)
def serve(port, host, backend_spec, data_dir, window_span):
    """Start the live conversation service."""
    import uvicorn

    from .service import create_app

    spec = backend_spec or _default_backend()
    app = create_app(
        extraction_backend=resolve_backend(spec, "extraction"),
        generation_backend=resolve_backend(spec, "generation"),
        data_dir=data_dir,
        default_span=window_span,
    )
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
