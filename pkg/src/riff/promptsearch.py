"""Discrete instruction search over the classifier, no parameter updates.

Each step scores vocabulary substitutions at one randomly chosen instruction
position by the first-order change in minibatch label log-likelihood, then
re-evaluates the top candidates exactly. The incumbent instruction is always
part of the exact evaluation, so per-step minibatch log-likelihood never
decreases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierParams, Verbalizer, input_position_grads, label_logprobs
from .data import TaskTemplate, format_input


@dataclass(frozen=True)
class Instruction:
    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(t) for t in self.ids))
        if len(self.ids) == 0:
            raise ValueError("instruction must have at least one position")

    def replaced(self, position: int, token_id: int) -> "Instruction":
        ids = list(self.ids)
        ids[position] = int(token_id)
        return Instruction(tuple(ids))

    def __len__(self) -> int:
        return len(self.ids)


def minibatch_loglik(
    classifier: ClassifierParams,
    template: TaskTemplate,
    instruction: Instruction,
    minibatch,
    verbalizer: Verbalizer,
) -> float:
    total = 0.0
    for ex in minibatch:
        formatted = format_input(template, instruction.ids, ex.x)
        total += float(label_logprobs(classifier, formatted, verbalizer)[ex.y])
    return total


def gs_candidates(
    classifier: ClassifierParams,
    template: TaskTemplate,
    instruction: Instruction,
    position: int,
    minibatch,
    verbalizer: Verbalizer,
    k: int,
) -> list[int]:
    """Top-k replacement tokens for one instruction position, ranked by the
    embedding-gradient dot product. Ties break toward the lower token id."""
    if not minibatch:
        raise ValueError("empty minibatch")
    if not 0 <= position < len(instruction):
        raise ValueError(f"position {position} outside instruction of length {len(instruction)}")
    if k < 1:
        raise ValueError("k must be at least 1")
    # instruction tokens sit right after BOS in both template variants
    row = 1 + position
    grad = np.zeros(classifier.cfg.embed_dim)
    for ex in minibatch:
        formatted = format_input(template, instruction.ids, ex.x)
        grad += input_position_grads(classifier, formatted, ex.y, verbalizer)[row]
    scores = classifier.seg("token_embedding") @ grad
    order = sorted(range(classifier.cfg.vocab_size), key=lambda v: (-scores[v], v))
    return order[:k]


def gs_step(
    classifier: ClassifierParams,
    template: TaskTemplate,
    instruction: Instruction,
    minibatch,
    verbalizer: Verbalizer,
    k: int,
    rng: np.random.Generator,
) -> Instruction:
    """One search iteration. The incumbent is always evaluated alongside the
    candidates, so the returned instruction is never worse on this minibatch."""
    position = int(rng.integers(len(instruction)))
    candidates = gs_candidates(classifier, template, instruction, position, minibatch, verbalizer, k)
    best = minibatch_loglik(classifier, template, instruction, minibatch, verbalizer)
    best_instruction = instruction
    for token_id in candidates:
        candidate = instruction.replaced(position, token_id)
        try:
            score = minibatch_loglik(classifier, template, candidate, minibatch, verbalizer)
        except ValueError:
            # candidate breaks the template (an extra EOS or mask); unusable
            continue
        if score > best:
            best, best_instruction = score, candidate
    return best_instruction


def gs_search(
    classifier: ClassifierParams,
    template: TaskTemplate,
    instruction: Instruction,
    examples,
    verbalizer: Verbalizer,
    steps: int,
    k: int,
    batch_size: int,
    seed: int,
) -> tuple[Instruction, list[tuple[float, float]]]:
    """Full search loop over random minibatches. Returns the final instruction
    and per-step (incumbent, accepted) minibatch log-likelihood pairs."""
    rng = np.random.default_rng(seed)
    examples = list(examples)
    history: list[tuple[float, float]] = []
    current = instruction
    for _ in range(steps):
        idx = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
        minibatch = [examples[i] for i in idx]
        before = minibatch_loglik(classifier, template, current, minibatch, verbalizer)
        current = gs_step(classifier, template, current, minibatch, verbalizer, k, rng)
        after = minibatch_loglik(classifier, template, current, minibatch, verbalizer)
        history.append((before, after))
    return current, history
