"""How answer quality tracks routing quality in a star graph.

With perfectly memorized experts the router is the only thing that can
fail, so exact match degrades linearly with routing accuracy. This demo
measures that directly: a synthetic 25-expert corpus, a router that is
right with probability p, and one evaluation per p.

    python3 demos/02_routing_quality.py
"""

from slg import Graph, MemorizationExpert, NoisyRouter, QAPair, evaluate_run


def build_corpus():
    pairs, by_expert = [], {}
    for i in range(25):
        name = f"SECTION {i:02d}"
        for j in range(20):
            pair = QAPair(
                pair_id=f"s{i:02d}:q{j:02d}",
                question=f"what does manual section {i:02d} require for item {j:02d}?",
                answer=f"item {j:02d} follows the rule of section {i:02d}",
                expert_name=name,
                split="test",
            )
            pairs.append(pair)
            by_expert.setdefault(name, []).append(pair)
    experts = {
        name: MemorizationExpert(name, expert_pairs, splits=("test",))
        for name, expert_pairs in by_expert.items()
    }
    return pairs, experts


def main() -> int:
    pairs, experts = build_corpus()
    truth = {pair.question: pair.expert_name for pair in pairs}
    names = sorted(experts)

    print(f"{len(experts)} experts, {len(pairs)} held-out questions\n")
    print(f"{'p_correct':>9}  {'routing':>8}  {'exact':>6}  {'rouge_f1':>8}  {'meteor':>6}")
    for p in (1.0, 0.9, 0.7, 0.5, 0.3):
        graph = Graph(NoisyRouter(truth, names, p_correct=p, seed=101), experts)
        report = evaluate_run(graph, pairs)
        print(
            f"{p:>9.1f}  {report.routing_accuracy:>8.3f}  {report.exact_match:>6.3f}"
            f"  {report.rouge_l_f1:>8.3f}  {report.meteor:>6.3f}"
        )

    print("\nexact match equals routing accuracy: a wrong expert cannot")
    print("reproduce another section's answer, and the right one always does")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
