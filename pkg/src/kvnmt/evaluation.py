"""BLEU, alignment error rate, attention diagnostics, trace export."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import EOS_TOKEN
from .errors import EmptyInputError


@dataclass
class AttentionTrace:
    """Per-step, per-round attention of one decoded or forced sentence.

    ``src_tokens`` includes the trailing end-of-sentence marker, so slot
    len(src_tokens) - 1 is the source eos slot. ``trg_tokens`` holds the
    chosen (or teacher) token of each step. ``attn[t][r]`` is the length-n
    attention vector of round r at step t.
    """

    src_tokens: list[str]
    trg_tokens: list[str]
    attn: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.attn[0]) if self.attn else 0

    @property
    def n_slots(self) -> int:
        return len(self.src_tokens)

    def final_round(self, t: int) -> np.ndarray:
        return self.attn[t][-1]


@dataclass
class CoverageReport:
    """Attention mass per source word with under/over-translation flags."""

    mass: np.ndarray
    under: list[int]
    over: list[int]
    under_pct: float
    over_pct: float
    tau_under: float
    tau_over: float


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps, refs, max_n: int = 4, smoothing: str = "none",
         lowercase: bool = False) -> float:
    """Corpus BLEU in [0, 100]: clipped n-gram precisions, brevity penalty.

    One reference per hypothesis. Orders with an empty corpus-wide count
    are skipped so that bleu(x, x) is 100 even for very short corpora.
    "add-one" smoothing adds one to every clipped and total count.
    """
    hyps, refs = list(hyps), list(refs)
    if not hyps:
        raise EmptyInputError("no hypotheses to score")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if smoothing not in ("none", "add-one"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    if lowercase:
        hyps = [[t.lower() for t in h] for h in hyps]
        refs = [[t.lower() for t in r] for r in refs]
    clipped = np.zeros(max_n)
    totals = np.zeros(max_n)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    log_precisions = []
    for n in range(max_n):
        c, t = clipped[n], totals[n]
        if smoothing == "add-one":
            c, t = c + 1.0, t + 1.0
        if t == 0:
            continue  # nothing of this order in the corpus
        if c == 0:
            return 0.0
        log_precisions.append(np.log(c / t))
    if not log_precisions:
        return 0.0
    geo = np.exp(np.mean(log_precisions))
    bp = 1.0 if hyp_len >= ref_len else np.exp(1.0 - ref_len / max(hyp_len, 1))
    return float(100.0 * bp * geo)


def aer(hyp_links: set, sure_links: set) -> float:
    """Alignment error rate against sure-only gold links; 0 is perfect."""
    if not hyp_links and not sure_links:
        return 0.0
    hit = len(hyp_links & sure_links)
    return 1.0 - 2.0 * hit / (len(hyp_links) + len(sure_links))


def corpus_aer(hyp_link_sets, sure_link_sets) -> float:
    """AER with counts aggregated over the corpus before the ratio."""
    hyp_link_sets, sure_link_sets = list(hyp_link_sets), list(sure_link_sets)
    if len(hyp_link_sets) != len(sure_link_sets):
        raise ValueError("alignment corpora differ in length")
    hits = total = 0
    for h, s in zip(hyp_link_sets, sure_link_sets):
        hits += len(h & s)
        total += len(h) + len(s)
    if total == 0:
        return 0.0
    return 1.0 - 2.0 * hits / total


def attention_to_alignment(trace: AttentionTrace, strategy: str = "argmax") -> set:
    """Links (source_index, target_index) from final-round attention.

    Steps that chose the target eos contribute nothing; the source eos slot
    is excluded from the argmax. Ties go to the smallest source index.
    """
    if strategy != "argmax":
        raise ValueError(f"unknown extraction strategy {strategy!r}")
    if not trace.attn:
        raise EmptyInputError("empty attention trace")
    eos_slot = trace.n_slots - 1
    links = set()
    for t, token in enumerate(trace.trg_tokens):
        if token == EOS_TOKEN:
            continue
        row = trace.final_round(t)[:eos_slot]
        if row.size == 0:
            continue
        links.add((int(np.argmax(row)), t))
    return links


def coverage_report(trace: AttentionTrace, tau_under: float = 0.2,
                    tau_over: float = 2.0) -> CoverageReport:
    """Total final-round attention mass per source word, eos slot excluded."""
    if not trace.attn:
        raise EmptyInputError("empty attention trace")
    eos_slot = trace.n_slots - 1
    mass = np.zeros(eos_slot)
    for t in range(len(trace.attn)):
        mass += trace.final_round(t)[:eos_slot]
    under = [j for j in range(eos_slot) if mass[j] < tau_under]
    over = [j for j in range(eos_slot) if mass[j] > tau_over]
    words = max(eos_slot, 1)
    return CoverageReport(
        mass=mass, under=under, over=over,
        under_pct=100.0 * len(under) / words,
        over_pct=100.0 * len(over) / words,
        tau_under=tau_under, tau_over=tau_over,
    )


def export_attention(traces, path) -> None:
    """Write traces as a JSON document, one matrix per round per sentence.

    Matrix rows follow target steps; values round-trip through import
    within float repr precision.
    """
    if isinstance(traces, AttentionTrace):
        traces = [traces]
    doc = {"sentences": []}
    for tr in traces:
        rounds = [
            [[float(v) for v in tr.attn[t][r]] for t in range(len(tr.attn))]
            for r in range(tr.n_rounds)
        ]
        doc["sentences"].append({
            "source": list(tr.src_tokens),
            "target": list(tr.trg_tokens),
            "attention": rounds,
        })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def import_attention(path) -> list[AttentionTrace]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    traces = []
    for sent in doc["sentences"]:
        rounds = sent["attention"]
        steps = len(rounds[0]) if rounds else 0
        attn = [
            [np.asarray(rounds[r][t], dtype=np.float64) for r in range(len(rounds))]
            for t in range(steps)
        ]
        traces.append(AttentionTrace(
            src_tokens=list(sent["source"]),
            trg_tokens=list(sent["target"]),
            attn=attn,
        ))
    return traces
