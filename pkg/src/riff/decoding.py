"""Sample-set construction: diverse beam search, nucleus sampling, and the
mixed scheme that blends the two.

All decoders force EOS once a sequence reaches max_len - 1 content tokens, so
every returned TokenSeq is well formed. Given a fixed seed the outputs are
bitwise reproducible; each call owns its own random state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import logsumexp, softmax
from .policy import PolicyParams, TokenSeq, encode_context, seq_logprob, step_logits
from .vocab import BOS, EOS


@dataclass(frozen=True)
class DecodeConfig:
    m: int = 8
    top_p: float = 0.99
    temperature: float = 0.7
    diversity_penalty: float = 3.0
    repetition_penalty: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("sample count must be at least 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.diversity_penalty < 0:
            raise ValueError("diversity penalty must be nonnegative")
        if self.repetition_penalty < 1:
            raise ValueError("repetition penalty must be at least 1")


def top_p_sample(
    policy: PolicyParams, x: TokenSeq, cfg: DecodeConfig
) -> list[tuple[TokenSeq, float]]:
    """Draw m sequences by nucleus sampling at temperature 1.

    Each step keeps the minimal probability-sorted token set whose cumulative
    mass reaches cfg.top_p, renormalizes, and samples from it. The returned
    log-probs are exact values under the unmodified policy.
    """
    rng = np.random.default_rng(cfg.seed)
    ctx = encode_context(policy, x)
    max_len = policy.cfg.max_len
    out = []
    for _ in range(cfg.m):
        ids: list[int] = []
        prev = BOS
        while True:
            if len(ids) == max_len - 1:
                tok = EOS
            else:
                probs = softmax(step_logits(policy, ctx, prev))
                order = np.argsort(-probs, kind="stable")
                csum = np.cumsum(probs[order])
                cut = min(int(np.searchsorted(csum, cfg.top_p, side="left")), len(order) - 1)
                keep = order[: cut + 1]
                nucleus = probs[keep] / probs[keep].sum()
                tok = int(rng.choice(keep, p=nucleus))
            ids.append(tok)
            if tok == EOS:
                break
            prev = tok
        z = TokenSeq(tuple(ids))
        out.append((z, seq_logprob(policy, x, z)))
    return out


def diverse_beam(policy: PolicyParams, x: TokenSeq, cfg: DecodeConfig) -> list[TokenSeq]:
    """m groups of beam width 1, expanded sequentially per step.

    Per step and group: the group's own prefix tokens get the repetition
    penalty on raw logits (positive logits divided, negative multiplied),
    temperature rescales, and tokens already chosen by earlier groups at this
    step are pushed down by diversity_penalty * count. Groups are ranked by
    cumulative penalized score. Fully deterministic.
    """
    ctx = encode_context(policy, x)
    max_len = policy.cfg.max_len
    prefixes: list[list[int]] = [[] for _ in range(cfg.m)]
    scores = [0.0] * cfg.m
    done = [False] * cfg.m
    while not all(done):
        chosen: dict[int, int] = {}
        for gidx in range(cfg.m):
            if done[gidx]:
                continue
            prefix = prefixes[gidx]
            prev = prefix[-1] if prefix else BOS
            logits = step_logits(policy, ctx, prev).copy()
            for tok in set(prefix):
                if logits[tok] > 0:
                    logits[tok] /= cfg.repetition_penalty
                else:
                    logits[tok] *= cfg.repetition_penalty
            penalized = logits / cfg.temperature
            for tok, count in chosen.items():
                penalized[tok] -= cfg.diversity_penalty * count
            step_scores = penalized - logsumexp(penalized)
            if len(prefix) == max_len - 1:
                tok = EOS
            else:
                tok = int(np.argmax(step_scores))
            scores[gidx] += float(step_scores[tok])
            prefix.append(tok)
            chosen[tok] = chosen.get(tok, 0) + 1
            if tok == EOS:
                done[gidx] = True
    ranked = sorted(range(cfg.m), key=lambda i: (-scores[i], i))
    return [TokenSeq(tuple(prefixes[i])) for i in ranked]


def _by_policy_logprob(policy, x, seqs) -> list[TokenSeq]:
    lps = [seq_logprob(policy, x, z) for z in seqs]
    order = sorted(range(len(seqs)), key=lambda i: (-lps[i], i))
    return [seqs[i] for i in order]


def mixed_decode(policy: PolicyParams, x: TokenSeq, cfg: DecodeConfig) -> list[TokenSeq]:
    """Run both decoders at m samples each, then keep the top m/2 from each
    ranked by policy log-probability. Duplicates across the halves are skipped
    in favor of the same source's next-ranked sample; repeats appear only when
    a source has no fresh sequences left."""
    if cfg.m % 2 != 0:
        raise ValueError("mixed decoding needs an even sample count")
    half = cfg.m // 2
    beam_ranked = _by_policy_logprob(policy, x, diverse_beam(policy, x, cfg))
    nucleus_ranked = _by_policy_logprob(policy, x, [z for z, _ in top_p_sample(policy, x, cfg)])
    picks: list[TokenSeq] = []
    seen: set[tuple[int, ...]] = set()
    for source in (beam_ranked, nucleus_ranked):
        taken = 0
        for z in source:
            if taken == half:
                break
            if z.ids not in seen:
                picks.append(z)
                seen.add(z.ids)
                taken += 1
        backfill = 0
        while taken < half:
            picks.append(source[backfill % len(source)])
            backfill += 1
            taken += 1
    return picks


def decode_samples(policy: PolicyParams, x: TokenSeq, scheme: str, cfg: DecodeConfig) -> list[TokenSeq]:
    if scheme == "beam":
        return diverse_beam(policy, x, cfg)
    if scheme == "top_p":
        return [z for z, _ in top_p_sample(policy, x, cfg)]
    if scheme == "mixed":
        return mixed_decode(policy, x, cfg)
    raise ValueError(f"unknown decode scheme {scheme!r}")
