"""Reference metrics for verbatim-recall evaluation.

All metrics share one tokenizer (NFC, lowercased, words and punctuation as
separate tokens) so scores are comparable across systems:

* exact match: normalized whole-string equality, case preserved;
* ROUGE-L: longest-common-subsequence precision/recall/F1 over whole texts;
* METEOR: staged unigram alignment (exact tokens first, then stems on the
  leftovers), scored by a recall-weighted harmonic mean times a fragmentation
  penalty. Stage match counts are fixed by token-type counting; among the
  alignments achieving them, the one with the fewest chunks (runs of pairs
  consecutive on both sides) decides the penalty.

:func:`evaluate_run` drives a graph over labeled test pairs and aggregates
these metrics next to routing accuracy, so answer quality and routing
quality can be read separately.
"""
from __future__ import annotations

import json
import sys
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import DatasetIntegrityError, ExpertInvocationError, RoutingError
from .graph import Graph
from .tokenization import stem, tokenize

__all__ = [
    "tokenize",
    "lcs_length",
    "rouge_l",
    "exact_match",
    "meteor",
    "evaluate_run",
    "render_comparison_csv",
    "RougeScore",
    "MeteorScore",
    "ExampleResult",
    "MetricReport",
]

DEFAULT_NODE_BUDGET = 50_000


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MeteorScore:
    score: float
    matches: int
    chunks: int
    precision: float
    recall: float
    fmean: float
    penalty: float


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, two-row dynamic programming."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(prediction: str, reference: str) -> RougeScore:
    """LCS-based F-score over the full token sequences.

    Either side empty scores zero across the board.
    """
    pred = tokenize(prediction).tokens
    ref = tokenize(reference, source="reference").tokens
    if not pred or not ref:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(pred, ref)
    if lcs == 0:
        return RougeScore(0.0, 0.0, 0.0)
    precision = lcs / len(pred)
    recall = lcs / len(ref)
    return RougeScore(precision, recall, 2 * precision * recall / (precision + recall))


def _normalize_exact(text: str) -> str:
    return " ".join(unicodedata.normalize("NFC", text).split())


def exact_match(prediction: str, reference: str) -> bool:
    """Case-sensitive equality after NFC and whitespace-run collapsing."""
    return _normalize_exact(prediction) == _normalize_exact(reference)


def _stage_quotas(pred: Sequence[str], ref: Sequence[str]) -> tuple[dict, dict, int]:
    """Fix per-stage match counts by type counting.

    Exact quota per token type is min(count in pred, count in ref); the
    leftovers, grouped by stem, set the stem-stage quota per stem class.
    """
    count_p = Counter(pred)
    count_r = Counter(ref)
    exact_quota = {t: min(count_p[t], count_r[t]) for t in count_p.keys() & count_r.keys()}
    exact_quota = {t: q for t, q in exact_quota.items() if q > 0}
    leftover_p: Counter = Counter()
    leftover_r: Counter = Counter()
    for t, c in count_p.items():
        if c - exact_quota.get(t, 0) > 0:
            leftover_p[stem(t)] += c - exact_quota.get(t, 0)
    for t, c in count_r.items():
        if c - exact_quota.get(t, 0) > 0:
            leftover_r[stem(t)] += c - exact_quota.get(t, 0)
    stem_quota = {
        s: min(leftover_p[s], leftover_r[s])
        for s in leftover_p.keys() & leftover_r.keys()
        if min(leftover_p[s], leftover_r[s]) > 0
    }
    matches = sum(exact_quota.values()) + sum(stem_quota.values())
    return exact_quota, stem_quota, matches


def _min_chunk_alignment(
    pred: Sequence[str],
    ref: Sequence[str],
    exact_quota: Mapping[str, int],
    stem_quota: Mapping[str, int],
    node_budget: int,
) -> int:
    """Fewest chunks over all alignments realizing the stage quotas.

    Depth-first search over prediction positions, trying the both-sides
    consecutive continuation first so the initial descent is already a good
    alignment. That first solution is found without budget; the budget only
    bounds the search for improvements, so results stay deterministic and
    pathological token repetition cannot stall evaluation.
    """
    n = len(pred)
    ref_by_type: dict[str, list[int]] = {}
    ref_by_stem: dict[str, list[int]] = {}
    for j, token in enumerate(ref):
        ref_by_type.setdefault(token, []).append(j)
        ref_by_stem.setdefault(stem(token), []).append(j)

    need_exact = dict(exact_quota)
    need_stem = dict(stem_quota)
    left_p: Counter = Counter(pred)
    avail_r: Counter = Counter(ref)
    # surplus capacity per stem class on each side; skipping or stem-matching
    # a token is only legal while these stay >= the outstanding stem quota
    cap_p: Counter = Counter()
    cap_r: Counter = Counter()
    for t, c in left_p.items():
        cap_p[stem(t)] += c - need_exact.get(t, 0)
    for t, c in avail_r.items():
        cap_r[stem(t)] += c - need_exact.get(t, 0)

    used = bytearray(len(ref))
    best = sys.maxsize
    nodes = 0
    have_incumbent = False

    if n + 200 > sys.getrecursionlimit():
        sys.setrecursionlimit(n + 400)

    def candidates(js: list[int], prefer: int | None) -> Iterable[int]:
        if prefer is not None and not used[prefer]:
            yield prefer
        for j in js:
            if not used[j] and j != prefer:
                yield j

    def dfs(i: int, chunks: int, last_i: int, last_j: int) -> None:
        nonlocal best, nodes, have_incumbent
        if chunks >= best:
            return
        if have_incumbent:
            nodes += 1
            if nodes > node_budget:
                return
        if i == n:
            best = chunks
            have_incumbent = True
            return
        t = pred[i]
        s = stem(t)
        prefer = last_j + 1 if last_i == i - 1 and last_j + 1 < len(ref) else None

        if need_exact.get(t, 0) > 0:
            for j in candidates(ref_by_type.get(t, []), prefer if prefer is not None and ref[prefer] == t else None):
                extra = 0 if (last_i == i - 1 and j == last_j + 1) else 1
                need_exact[t] -= 1
                left_p[t] -= 1
                avail_r[ref[j]] -= 1
                used[j] = 1
                dfs(i + 1, chunks + extra, i, j)
                used[j] = 0
                avail_r[ref[j]] += 1
                left_p[t] += 1
                need_exact[t] += 1

        if need_stem.get(s, 0) > 0 and left_p[t] - need_exact.get(t, 0) > 0:
            stem_prefer = None
            if prefer is not None and stem(ref[prefer]) == s and ref[prefer] != t:
                stem_prefer = prefer
            for j in candidates(ref_by_stem.get(s, []), stem_prefer):
                tj = ref[j]
                if tj == t:
                    continue
                if avail_r[tj] - need_exact.get(tj, 0) < 1:
                    continue
                extra = 0 if (last_i == i - 1 and j == last_j + 1) else 1
                need_stem[s] -= 1
                left_p[t] -= 1
                cap_p[s] -= 1
                avail_r[tj] -= 1
                cap_r[s] -= 1
                used[j] = 1
                dfs(i + 1, chunks + extra, i, j)
                used[j] = 0
                cap_r[s] += 1
                avail_r[tj] += 1
                cap_p[s] += 1
                left_p[t] += 1
                need_stem[s] += 1

        if left_p[t] - 1 >= need_exact.get(t, 0) and cap_p[s] - 1 >= need_stem.get(s, 0):
            left_p[t] -= 1
            cap_p[s] -= 1
            dfs(i + 1, chunks, last_i, last_j)
            cap_p[s] += 1
            left_p[t] += 1

    dfs(0, 0, -2, -2)
    return best


def meteor(prediction: str, reference: str, *, node_budget: int = DEFAULT_NODE_BUDGET) -> MeteorScore:
    """Staged-alignment METEOR score.

    Matches exact tokens first, then stems over the leftovers; both stage
    counts follow from type counting alone. With ``m`` matches over ``ch``
    chunks, precision m/|pred| and recall m/|ref| combine into
    Fmean = 10PR / (R + 9P), discounted by the fragmentation penalty
    0.5 * (ch/m)^3. No matches scores zero; identical texts of ``m`` tokens
    score 1 - 0.5/m^3 (one chunk).
    """
    pred = tokenize(prediction).tokens
    ref = tokenize(reference, source="reference").tokens
    if not pred or not ref:
        return MeteorScore(0.0, 0, 0, 0.0, 0.0, 0.0, 0.0)
    exact_quota, stem_quota, matches = _stage_quotas(pred, ref)
    if matches == 0:
        return MeteorScore(0.0, 0, 0, 0.0, 0.0, 0.0, 0.0)
    chunks = _min_chunk_alignment(pred, ref, exact_quota, stem_quota, node_budget)
    precision = matches / len(pred)
    recall = matches / len(ref)
    fmean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return MeteorScore(
        score=fmean * (1 - penalty),
        matches=matches,
        chunks=chunks,
        precision=precision,
        recall=recall,
        fmean=fmean,
        penalty=penalty,
    )


@dataclass(frozen=True)
class ExampleResult:
    pair_id: str
    expert_name: str
    routed_expert: str | None
    failed: bool
    exact_match: bool
    rouge_l: RougeScore
    meteor: float


@dataclass(frozen=True)
class MetricReport:
    n_examples: int
    failures: int
    exact_match: float
    rouge_l_precision: float
    rouge_l_recall: float
    rouge_l_f1: float
    meteor: float
    routing_accuracy: float | None
    per_example: tuple[ExampleResult, ...]

    def to_dict(self) -> dict:
        return {
            "aggregate": {
                "n_examples": self.n_examples,
                "failures": self.failures,
                "exact_match": self.exact_match,
                "rouge_l_precision": self.rouge_l_precision,
                "rouge_l_recall": self.rouge_l_recall,
                "rouge_l_f1": self.rouge_l_f1,
                "meteor": self.meteor,
                "routing_accuracy": self.routing_accuracy,
            },
            "per_example": [
                {
                    "pair_id": e.pair_id,
                    "expert_name": e.expert_name,
                    "routed_expert": e.routed_expert,
                    "failed": e.failed,
                    "exact_match": e.exact_match,
                    "rouge_l_precision": e.rouge_l.precision,
                    "rouge_l_recall": e.rouge_l.recall,
                    "rouge_l_f1": e.rouge_l.f1,
                    "meteor": e.meteor,
                }
                for e in self.per_example
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)


def evaluate_run(
    graph: Graph,
    pairs: Iterable,
    *,
    seed: int = 0,
    with_routing_truth: bool = True,
    node_budget: int = DEFAULT_NODE_BUDGET,
    expected_split: str = "test",
) -> MetricReport:
    """Run every held-out pair through the graph and score the answers.

    Pairs must all carry the expected split (test unless a caller is doing
    validation-based model selection); anything else is an integrity error,
    never silently evaluated. Routing and expert failures score zero on
    every metric and are counted, so a flaky backend shows up as a worse
    run, not a shorter one. Routing accuracy compares the routed expert to
    the pair's labeled expert and is omitted when ``with_routing_truth`` is
    false.
    """
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    if not ordered:
        raise ValueError("evaluate_run needs at least one pair")
    wrong_split = [p.pair_id for p in ordered if p.split != expected_split]
    if wrong_split:
        raise DatasetIntegrityError(
            f"evaluation accepts only {expected_split} pairs; offending ids: {wrong_split[:5]}"
        )
    results = []
    failures = 0
    routed_correct = 0
    for pair in ordered:
        routed = None
        failed = False
        prediction = ""
        try:
            answer = graph.answer(pair.question, seed=seed)
            prediction = answer.text
            routed = answer.expert_name
        except RoutingError:
            failed = True
        except ExpertInvocationError as exc:
            failed = True
            routed = exc.trace.expert_name if exc.trace else None
        if failed:
            failures += 1
            em, rouge, met = False, RougeScore(0.0, 0.0, 0.0), 0.0
        else:
            em = exact_match(prediction, pair.answer)
            rouge = rouge_l(prediction, pair.answer)
            met = meteor(prediction, pair.answer, node_budget=node_budget).score
        if routed == pair.expert_name:
            routed_correct += 1
        results.append(
            ExampleResult(
                pair_id=pair.pair_id,
                expert_name=pair.expert_name,
                routed_expert=routed,
                failed=failed,
                exact_match=em,
                rouge_l=rouge,
                meteor=met,
            )
        )
    n = len(results)
    return MetricReport(
        n_examples=n,
        failures=failures,
        exact_match=sum(e.exact_match for e in results) / n,
        rouge_l_precision=sum(e.rouge_l.precision for e in results) / n,
        rouge_l_recall=sum(e.rouge_l.recall for e in results) / n,
        rouge_l_f1=sum(e.rouge_l.f1 for e in results) / n,
        meteor=sum(e.meteor for e in results) / n,
        routing_accuracy=(routed_correct / n) if with_routing_truth else None,
        per_example=tuple(results),
    )


def render_comparison_csv(reports: Mapping[str, object]) -> str:
    """Side-by-side comparison table, two decimal places per metric.

    Values may be :class:`MetricReport` instances or plain mappings with
    ``rouge_l_f1``, ``exact_match``, and ``meteor`` keys.
    """
    lines = ["system,rouge_l_f1,exact_match,meteor"]
    for name, report in reports.items():
        if isinstance(report, MetricReport):
            values = (report.rouge_l_f1, report.exact_match, report.meteor)
        else:
            values = (report["rouge_l_f1"], report["exact_match"], report["meteor"])
        lines.append(name + "," + ",".join(f"{v:.2f}" for v in values))
    return "\n".join(lines) + "\n"
