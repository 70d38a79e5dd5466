"""Rewrite-quality metrics computable in-process (n-gram lexical diversity)
plus the subprocess boundary for external scorers."""

from __future__ import annotations

import json
import subprocess
from collections import Counter
from itertools import combinations


def _ngrams(tokens, n: int) -> Counter:
    toks = list(tokens)
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def rouge_n(a, b, n: int) -> float:
    """F1 of clipped n-gram overlap between token lists; 0 when either side
    has no n-grams."""
    if n not in (1, 2):
        raise ValueError("only unigram and bigram overlap are supported")
    ga, gb = _ngrams(a, n), _ngrams(b, n)
    ta, tb = sum(ga.values()), sum(gb.values())
    if ta == 0 or tb == 0:
        return 0.0
    overlap = sum(min(count, gb[gram]) for gram, count in ga.items())
    if overlap == 0:
        return 0.0
    precision = overlap / tb
    recall = overlap / ta
    return 2.0 * precision * recall / (precision + recall)


def lexical_diversity(original, paraphrase) -> float:
    """1 - mean of unigram and bigram overlap F1; higher means more lexically
    different from the original."""
    original = list(original)
    paraphrase = list(paraphrase)
    if not original or not paraphrase:
        raise ValueError("lexical diversity needs non-empty token lists")
    return 1.0 - (rouge_n(original, paraphrase, 1) + rouge_n(original, paraphrase, 2)) / 2.0


def pairwise_ld(paraphrases) -> float:
    """Mean lexical diversity over all unordered pairs of rewrites."""
    items = [list(p) for p in paraphrases]
    if len(items) < 2:
        raise ValueError("pairwise diversity needs at least two rewrites")
    values = [lexical_diversity(a, b) for a, b in combinations(items, 2)]
    return float(sum(values) / len(values))


def tokenize_text(text: str) -> list[str]:
    return text.lower().split()


def external_score(adapter_cmd, pairs) -> list[tuple[str, float]]:
    """Score (text_a, text_b) pairs through an external adapter process.

    Requests go to the adapter's stdin as JSONL {"id","text_a","text_b"};
    responses come back as JSONL {"id","score"} in any order and are matched
    by id. The adapter must exit 0. An empty pair list short-circuits without
    invoking anything.
    """
    pairs = list(pairs)
    if not pairs:
        return []
    request_ids = [str(pid) for pid, _, _ in pairs]
    if len(set(request_ids)) != len(request_ids):
        raise ValueError("request ids must be unique")
    payload = "\n".join(
        json.dumps({"id": str(pid), "text_a": a, "text_b": b}) for pid, a, b in pairs
    )
    proc = subprocess.run(
        list(adapter_cmd), input=payload + "\n", capture_output=True, text=True
    )
    if proc.returncode != 0:
        raise RuntimeError(
            f"adapter exited with status {proc.returncode}: {proc.stderr.strip()}"
        )
    scores: dict[str, float] = {}
    for line in proc.stdout.splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            scores[str(rec["id"])] = float(rec["score"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed adapter response line {line!r}") from exc
    missing = [pid for pid in request_ids if pid not in scores]
    if missing:
        raise ValueError(f"adapter response missing ids: {missing}")
    return [(pid, scores[pid]) for pid in request_ids]
