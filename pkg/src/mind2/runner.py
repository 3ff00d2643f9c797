"""End-to-end experiment orchestration: single runs, component ablation
grids, and training-fraction sweeps, all reproducible from a serialized run
spec. Under mock backends a spec re-executes to byte-identical artifacts.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backend import (Backend, ECHO_MARKER, GenerationConfig, MockBackend,
                      resolve_backend)
from .bck import BckStore, extract_conversations
from .corpus import (Conversation, Speaker, Strategy, load_esconv, load_jsonl,
                     sample_split, standard_split)
from .discourse import DEFAULT_SPAN
from .errors import Mind2Error
from .linearize import (AblationMask, build_target, linearize_turn,
                        parse_target, standard_ablation_grid)
from .metrics import EvalPair, MetricReport, evaluate, relative_change

logger = logging.getLogger(__name__)

STRATEGY_MENU = "; ".join(s.value for s in Strategy)

GENERATION_PREAMBLE = (
    "You are an emotional-support dialogue system. The linearized context "
    "below encodes the seeker's situation, the dialogue so far, and "
    "extracted cognitive knowledge. Reply as the supporter in exactly this "
    "format: [str] <strategy label> [rsp] <response>. Choose the strategy "
    f"label from: {STRATEGY_MENU}.\n\n"
)

SCORING_PREAMBLE = "Repeat the text after the marker exactly.\n"


class RunError(Mind2Error):
    """Too many per-turn failures to trust the run."""


@dataclass(frozen=True)
class RunSpec:
    corpus_path: str
    fraction: float = 0.10
    seed: int = 7
    window_span: int = DEFAULT_SPAN
    mask: AblationMask = field(default_factory=AblationMask.full)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    extraction_backend: str = "mock"
    generation_backend: str = "mock"
    scoring_backend: str | None = None
    output_dir: str = "runs/out"
    eval_scope: str = "all"        # "all" supporter turns with history, or "final"
    error_budget: float = 0.05
    concurrency: int = 1
    limit: int | None = None       # cap on evaluated conversations

    def to_dict(self) -> dict:
        return {
            "corpus_path": self.corpus_path,
            "fraction": self.fraction,
            "seed": self.seed,
            "window_span": self.window_span,
            "mask": self.mask.to_dict(),
            "generation": self.generation.to_dict(),
            "extraction_backend": self.extraction_backend,
            "generation_backend": self.generation_backend,
            "scoring_backend": self.scoring_backend,
            "output_dir": self.output_dir,
            "eval_scope": self.eval_scope,
            "error_budget": self.error_budget,
            "concurrency": self.concurrency,
            "limit": self.limit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunSpec":
        kwargs = dict(data)
        kwargs["mask"] = AblationMask.from_dict(data.get("mask", {}))
        kwargs["generation"] = GenerationConfig.from_dict(data.get("generation", {}))
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        return cls(**{k: v for k, v in kwargs.items() if k in known})

    @classmethod
    def from_file(cls, path: str | Path) -> "RunSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )


@dataclass
class RunArtifacts:
    spec: RunSpec
    report: MetricReport
    predictions: list[dict]
    errors: list[dict]
    output_dir: Path


def load_corpus(path: str | Path) -> list[Conversation]:
    path = Path(path)
    if path.suffix == ".jsonl":
        return load_jsonl(path)
    return load_esconv(path)


def _eval_turns(conv: Conversation, scope: str) -> list[int]:
    turns = [u.index for u in conv.utterances
             if u.speaker is Speaker.SYSTEM and u.index >= 2]
    if scope == "final" and turns:
        return [turns[-1]]
    return turns


def _score_targets(backend: Backend, texts, config: GenerationConfig):
    sequences = []
    for text in texts:
        prompt = f"{SCORING_PREAMBLE}{ECHO_MARKER} {text}"
        response = backend.complete(prompt, config, want_logprobs=True)
        if not response.token_logprobs:
            return None
        sequences.append(response.token_logprobs)
    return sequences


def run_generation(spec: RunSpec, *, corpus=None, extraction_backend=None,
                   generation_backend=None, scoring_backend=None,
                   cache_path=None, write=True) -> RunArtifacts:
    """Execute one full experiment.

    For every evaluated supporter turn: look up (or extract) knowledge for
    the history, assemble the input sequence under the spec's mask, request
    a generation, parse it, and pair it with the gold turn. Backends may be
    passed in directly; otherwise the spec's ids are resolved ("mock", a
    URL, or "mock-echo" which answers every request with the gold target).
    """
    out_dir = Path(spec.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = load_corpus(spec.corpus_path)
    split = sample_split(standard_split(corpus, spec.seed), spec.fraction, spec.seed)
    eval_convs = list(split.test)
    if spec.limit is not None:
        eval_convs = eval_convs[:spec.limit]

    if extraction_backend is None:
        extraction_backend = resolve_backend(spec.extraction_backend, "extraction")
    echo_mode = generation_backend is None and spec.generation_backend == "mock-echo"
    if generation_backend is None:
        generation_backend = (MockBackend() if echo_mode
                              else resolve_backend(spec.generation_backend))
    if scoring_backend is None and spec.scoring_backend:
        scoring_backend = resolve_backend(spec.scoring_backend)

    cache = Path(cache_path) if cache_path else out_dir / "bck_cache.jsonl"
    cache.parent.mkdir(parents=True, exist_ok=True)
    store = extract_conversations(eval_convs, spec.window_span,
                                  extraction_backend, cache,
                                  concurrency=spec.concurrency)

    targets = [(conv, psi) for conv in eval_convs
               for psi in _eval_turns(conv, spec.eval_scope)]

    def generate_one(item):
        conv, psi = item
        example = linearize_turn(conv, psi, store, spec.mask,
                                 budget=spec.generation.max_input_tokens)
        gold = conv.utterances[psi - 1]
        gold_target = build_target(gold.strategy or Strategy.OTHERS, gold.text)
        prompt = GENERATION_PREAMBLE + example.omega
        if echo_mode:
            generation_backend.add_rule(example.omega, gold_target)
        response = generation_backend.complete(prompt, spec.generation)
        parsed = parse_target(response.text)
        pair = EvalPair(
            generated=(parsed.strategy, parsed.response),
            reference=(gold.strategy or Strategy.OTHERS, gold.text),
            conversation_id=conv.id,
            turn=psi,
        )
        row = {
            "conversation_id": conv.id,
            "turn": psi,
            "omega": example.omega,
            "generated_text": response.text,
            "strategy": parsed.strategy.value,
            "response": parsed.response,
            "flags": ([] if parsed.well_formed else ["ill_formed_target"])
            + list(response.flags),
        }
        return pair, row, gold.text

    results, errors = [], []
    if spec.concurrency > 1 and not echo_mode:
        with ThreadPoolExecutor(max_workers=spec.concurrency) as pool:
            futures = list(pool.map(_trap(generate_one), targets))
        for item, outcome in zip(targets, futures):
            _collect(item, outcome, results, errors)
    else:
        for item in targets:
            _collect(item, _trap(generate_one)(item), results, errors)

    if targets and len(errors) / len(targets) > spec.error_budget:
        raise RunError(
            f"{len(errors)}/{len(targets)} turns failed "
            f"(budget {spec.error_budget:.0%}): {errors[:3]}"
        )

    results.sort(key=lambda r: (r[0].conversation_id, r[0].turn))
    pairs = [pair for pair, _, _ in results]
    rows = [row for _, row, _ in results]
    gold_texts = [gold for _, _, gold in results]

    logprobs = None
    if scoring_backend is not None and pairs:
        logprobs = _score_targets(scoring_backend, gold_texts, spec.generation)

    metadata = {
        "evaluated_turns": len(pairs),
        "errored_turns": len(errors),
        "eval_scope": spec.eval_scope,
        "train_conversations": len(split.train),
        "test_conversations": len(eval_convs),
        "fraction": spec.fraction,
        "seed": spec.seed,
        "mask": spec.mask.label(),
        "generation_backend": getattr(generation_backend, "name", "injected"),
        "scoring_backend": (getattr(scoring_backend, "name", None)
                            if scoring_backend else None),
        "note": "generation backend stands in for a fine-tuned decoder; "
                "perplexity is comparable only within one scoring backend",
    }
    report = evaluate(pairs, target_logprobs=logprobs, metadata=metadata) \
        if pairs else MetricReport(0, None, 0, 0, 0, 0, 0, metadata=metadata)

    artifacts = RunArtifacts(spec=spec, report=report, predictions=rows,
                             errors=errors, output_dir=out_dir)
    if write:
        _write_artifacts(artifacts)
    return artifacts


def _trap(fn):
    def wrapped(item):
        try:
            return ("ok", fn(item))
        except (Mind2Error, ValueError) as exc:
            return ("error", exc)
    return wrapped


def _collect(item, outcome, results, errors):
    status, payload = outcome
    if status == "ok":
        results.append(payload)
    else:
        conv, psi = item
        logger.warning("turn %s#%s failed: %s", conv.id, psi, payload)
        errors.append({"conversation_id": conv.id, "turn": psi,
                       "error": str(payload)})


def _write_artifacts(artifacts: RunArtifacts) -> None:
    from .report import format_table  # local import to keep matplotlib lazy

    out = artifacts.output_dir
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for row in artifacts.predictions:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    payload = {"spec": artifacts.spec.to_dict(),
               "report": artifacts.report.to_dict(),
               "errors": artifacts.errors}
    (out / "report.json").write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    (out / "report.txt").write_text(
        format_table([(artifacts.spec.mask.label(), artifacts.report)]) + "\n",
        encoding="utf-8",
    )
    artifacts.spec.save(out / "spec.json")


@dataclass
class GridResult:
    rows: list[tuple[str, MetricReport]]

    def to_dict(self) -> dict:
        return {"rows": [{"label": label, "report": report.to_dict()}
                         for label, report in self.rows]}


def run_ablation_grid(base: RunSpec, masks: list[AblationMask] | None = None,
                      **backend_overrides) -> GridResult:
    """One run per mask over a shared extraction cache (knowledge does not
    depend on the mask, so only the first run pays for extraction). The
    full-knowledge configuration is placed last."""
    masks = list(masks) if masks else standard_ablation_grid()
    if not masks:
        raise ValueError("need at least one mask")
    base_dir = Path(base.output_dir)
    cache = base_dir / "bck_cache.jsonl"
    rows = []
    for i, mask in enumerate(masks):
        spec = replace(base, mask=mask,
                       output_dir=str(base_dir / f"mask_{i}_{_slug(mask.label())}"))
        artifacts = run_generation(spec, cache_path=cache, **backend_overrides)
        rows.append((mask.label(), artifacts.report))
    result = GridResult(rows)
    _write_grid(base_dir, "ablation", result)
    return result


@dataclass
class SweepResult:
    rows: list[tuple[float, MetricReport]]
    baseline_fraction: float

    def rc_rows(self) -> list[tuple[float, dict]]:
        base = dict(self.rows)[self.baseline_fraction]
        return [(fraction, relative_change(base, report))
                for fraction, report in self.rows
                if fraction != self.baseline_fraction]

    def to_dict(self) -> dict:
        return {
            "baseline_fraction": self.baseline_fraction,
            "rows": [{"fraction": fraction, "report": report.to_dict()}
                     for fraction, report in self.rows],
            "relative_change": [
                {"fraction": fraction, "vs_baseline": rc}
                for fraction, rc in self.rc_rows()
            ],
        }


def run_fraction_sweep(base: RunSpec, fractions: list[float],
                       **backend_overrides) -> SweepResult:
    """One run per training fraction; nested membership comes from the
    seeded prefix sampling. Relative change is reported against the
    smallest fraction."""
    if not fractions:
        raise ValueError("need at least one fraction")
    for fraction in fractions:
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction out of (0, 1]: {fraction}")
    ordered = sorted(set(fractions))
    base_dir = Path(base.output_dir)
    cache = base_dir / "bck_cache.jsonl"
    rows = []
    for fraction in ordered:
        spec = replace(base, fraction=fraction,
                       output_dir=str(base_dir / f"fraction_{int(fraction * 100):03d}"))
        artifacts = run_generation(spec, cache_path=cache, **backend_overrides)
        rows.append((fraction, artifacts.report))
    result = SweepResult(rows, baseline_fraction=ordered[0])
    _write_sweep(base_dir, result)
    return result


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label.lower()).strip("_")


def _write_grid(out_dir: Path, name: str, result: GridResult) -> None:
    from .report import format_table

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(
        json.dumps(result.to_dict(), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    (out_dir / f"{name}.txt").write_text(format_table(result.rows) + "\n",
                                         encoding="utf-8")


def _write_sweep(out_dir: Path, result: SweepResult) -> None:
    from .report import format_sweep_table

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.json").write_text(
        json.dumps(result.to_dict(), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    (out_dir / "sweep.txt").write_text(format_sweep_table(result) + "\n",
                                       encoding="utf-8")
