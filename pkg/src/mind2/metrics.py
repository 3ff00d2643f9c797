"""Automatic evaluation metrics for strategy prediction and response
generation: macro F1, perplexity, BLEU-2/4, Distinct-1/2, ROUGE-L, and the
relative-change arithmetic used in comparison tables.

All metrics share one documented tokenizer (lowercase, punctuation split off,
whitespace split), so absolute scores are comparable only within this
toolkit. Programmatic values live in [0, 1] (perplexity excepted); reports
scale everything except perplexity by 100.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .corpus import Strategy

BLEU_EPSILON = 1e-9

_TOKEN = re.compile(r"'\w+|\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation off as separate tokens, keep
    apostrophe-led contractions attached ("i", "'m", "ok", ".")."""
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class EvalPair:
    generated: tuple[Strategy, str]
    reference: tuple[Strategy, str]
    conversation_id: str = ""
    turn: int = 0


def _token_pairs(pairs) -> list[tuple[list[str], list[str]]]:
    if not pairs:
        raise ValueError("need at least one evaluation pair")
    return [(tokenize(p.generated[1]), tokenize(p.reference[1])) for p in pairs]


def bleu_n(pairs, n: int = 2, level: str = "corpus") -> float:
    """BLEU up to order n: geometric mean of modified n-gram precisions
    times a brevity penalty.

    Corpus level pools clipped counts over all pairs before the mean;
    sentence level scores each pair with epsilon smoothing on zero counts
    and averages.
    """
    token_pairs = _token_pairs(pairs)
    if level == "corpus":
        clipped = [0] * n
        totals = [0] * n
        gen_len = ref_len = 0
        for gen, ref in token_pairs:
            gen_len += len(gen)
            ref_len += len(ref)
            for k in range(1, n + 1):
                gen_grams = _ngrams(gen, k)
                ref_grams = _ngrams(ref, k)
                clipped[k - 1] += sum(
                    min(count, ref_grams[g]) for g, count in gen_grams.items()
                )
                totals[k - 1] += sum(gen_grams.values())
        if gen_len == 0:
            raise ValueError("empty generated corpus")
        if any(t == 0 for t in totals) or any(c == 0 for c in clipped):
            return 0.0
        log_mean = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
        bp = 1.0 if gen_len > ref_len else math.exp(1 - ref_len / gen_len)
        return bp * math.exp(log_mean)
    if level == "sentence":
        scores = [_sentence_bleu(gen, ref, n) for gen, ref in token_pairs]
        return sum(scores) / len(scores)
    raise ValueError(f"level must be 'corpus' or 'sentence', got {level!r}")


def _sentence_bleu(gen: list[str], ref: list[str], n: int) -> float:
    if not gen:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        gen_grams = _ngrams(gen, k)
        ref_grams = _ngrams(ref, k)
        clipped = sum(min(c, ref_grams[g]) for g, c in gen_grams.items())
        total = sum(gen_grams.values())
        if total == 0:
            p = BLEU_EPSILON
        elif clipped == 0:
            p = BLEU_EPSILON / total
        else:
            p = clipped / total
        log_sum += math.log(p)
    bp = 1.0 if len(gen) > len(ref) else math.exp(1 - len(ref) / max(len(gen), 1))
    return bp * math.exp(log_sum / n)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pairs) -> float:
    """Mean over pairs of the LCS-based balanced F1."""
    token_pairs = _token_pairs(pairs)
    scores = []
    for gen, ref in token_pairs:
        lcs = _lcs_length(gen, ref)
        p = lcs / len(gen) if gen else 0.0
        r = lcs / len(ref) if ref else 0.0
        scores.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return sum(scores) / len(scores)


def distinct_n(generated_texts, n: int = 1) -> float:
    """Distinct n-grams over total n-grams, pooled across all generated
    responses (reference side plays no part)."""
    seen = set()
    total = 0
    for text in generated_texts:
        tokens = tokenize(text)
        for i in range(len(tokens) - n + 1):
            seen.add(tuple(tokens[i:i + n]))
            total += 1
    if total == 0:
        raise ValueError(f"no {n}-grams in the generated corpus")
    return len(seen) / total


def macro_f1(pairs, over_all_labels: bool = False) -> float:
    """Macro-averaged strategy F1.

    Averages per-label F1 over labels present in references or predictions;
    per-label F1 with a zero denominator counts as 0. Set over_all_labels to
    average over the full closed label set instead.
    """
    if not pairs:
        raise ValueError("need at least one evaluation pair")
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    present = set()
    for pair in pairs:
        pred, ref = pair.generated[0], pair.reference[0]
        present.add(pred)
        present.add(ref)
        if pred == ref:
            tp[pred] += 1
        else:
            fp[pred] += 1
            fn[ref] += 1
    labels = list(Strategy) if over_all_labels else sorted(present, key=lambda s: s.value)
    scores = []
    for label in labels:
        denom = 2 * tp[label] + fp[label] + fn[label]
        scores.append(2 * tp[label] / denom if denom else 0.0)
    return sum(scores) / len(scores)


def perplexity(target_logprobs) -> float:
    """exp(-mean logprob) over every target token, natural-log units.

    Accepts one sequence per target of either bare floats or (token,
    logprob) tuples.
    """
    values = []
    for sequence in target_logprobs:
        for item in sequence:
            lp = item[1] if isinstance(item, (tuple, list)) else item
            if lp is None or not math.isfinite(lp):
                raise ValueError("every target token needs a finite logprob")
            values.append(float(lp))
    if not values:
        raise ValueError("no target tokens to score")
    return math.exp(-sum(values) / len(values))


METRIC_NAMES = ("f1", "ppl", "b2", "b4", "d1", "d2", "rl")
HIGHER_IS_BETTER = {"f1": True, "ppl": False, "b2": True, "b4": True,
                    "d1": True, "d2": True, "rl": True}
DISPLAY_NAMES = {"f1": "F1", "ppl": "PPL", "b2": "B-2", "b4": "B-4",
                 "d1": "D-1", "d2": "D-2", "rl": "R-L"}


@dataclass
class MetricReport:
    f1: float
    ppl: float | None
    b2: float
    b4: float
    d1: float
    d2: float
    rl: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("b2", "b4", "d1", "d2", "rl", "f1"):
            value = getattr(self, name)
            if not 0 <= value <= 1 + 1e-12:
                raise ValueError(f"{name} out of [0, 1]: {value}")
        if self.ppl is not None and self.ppl < 1 - 1e-12:
            raise ValueError(f"perplexity below 1: {self.ppl}")

    def value(self, name: str) -> float | None:
        return getattr(self, name)

    def scaled(self) -> dict:
        """Report-facing values: everything but perplexity times 100."""
        out = {}
        for name in METRIC_NAMES:
            value = getattr(self, name)
            if value is None:
                out[name] = None
            else:
                out[name] = value if name == "ppl" else value * 100
        return out

    def to_dict(self) -> dict:
        return {"metrics": {n: getattr(self, n) for n in METRIC_NAMES},
                "scaled": self.scaled(), "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        metrics = data["metrics"]
        return cls(metadata=data.get("metadata", {}),
                   **{n: metrics[n] for n in METRIC_NAMES})

    @classmethod
    def from_scaled(cls, scaled: dict, metadata: dict | None = None) -> "MetricReport":
        """Build from table-style values (x100 except perplexity)."""
        kwargs = {}
        for name in METRIC_NAMES:
            value = scaled.get(name)
            if value is None:
                kwargs[name] = None
            else:
                kwargs[name] = value if name == "ppl" else value / 100
        return cls(metadata=metadata or {}, **kwargs)


def evaluate(pairs, target_logprobs=None, metadata: dict | None = None,
             bleu_level: str = "corpus") -> MetricReport:
    """Compute the full report over evaluation pairs.

    Perplexity is filled only when scoring-backend logprobs are supplied;
    otherwise it is reported unavailable rather than fabricated.
    """
    generated_texts = [p.generated[1] for p in pairs]
    ppl = perplexity(target_logprobs) if target_logprobs else None
    meta = {"pairs": len(pairs)}
    meta.update(metadata or {})
    return MetricReport(
        f1=macro_f1(pairs),
        ppl=ppl,
        b2=bleu_n(pairs, 2, bleu_level),
        b4=bleu_n(pairs, 4, bleu_level),
        d1=distinct_n(generated_texts, 1),
        d2=distinct_n(generated_texts, 2),
        rl=rouge_l(pairs),
        metadata=meta,
    )


def relative_change(baseline: MetricReport, other: MetricReport) -> dict:
    """Signed per-metric change where positive always means improvement:
    (other - base) / base for higher-is-better metrics, flipped for
    perplexity. Metrics missing or zero in the baseline map to None."""
    out = {}
    for name in METRIC_NAMES:
        base = baseline.value(name)
        new = other.value(name)
        if base is None or new is None or base == 0:
            out[name] = None
        elif HIGHER_IS_BETTER[name]:
            out[name] = (new - base) / base
        else:
            out[name] = (base - new) / base
    return out


def format_relative_change(value: float | None) -> str:
    """Arrow notation: up for improvement, down for regression."""
    if value is None:
        return "-"
    if value > 0:
        return f"↑{value * 100:.1f}%"
    if value < 0:
        return f"↓{-value * 100:.1f}%"
    return "0.0%"
