"""Datasets and input formatting.

The synthetic task is a majority-vote construction: each label owns a family
of two interchangeable content tokens, distractor tokens are label-neutral,
and the label is the family with the strict majority count. A rule-based
oracle therefore classifies every generated example perfectly, which pins
down what "signal" means in end-to-end checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .policy import TokenSeq
from .vocab import BOS, EOS, FIRST_CONTENT_ID, MASK, SEP, is_scaffold


@dataclass(frozen=True)
class Example:
    uid: int
    x: TokenSeq
    y: int
    text: str | None = None


@dataclass(frozen=True)
class TaskTemplate:
    """Scaffold around the content: BOS + instruction + content + SEP + MASK +
    EOS, or the mask-first variant BOS + instruction + MASK + SEP + content +
    EOS."""

    instruction: tuple[int, ...] = ()
    mask_first: bool = False
    max_input_len: int = 128

    def __post_init__(self):
        object.__setattr__(self, "instruction", tuple(int(t) for t in self.instruction))

    def to_dict(self) -> dict:
        return {
            "instruction": list(self.instruction),
            "mask_first": self.mask_first,
            "max_input_len": self.max_input_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskTemplate":
        return cls(
            instruction=tuple(d.get("instruction", ())),
            mask_first=bool(d.get("mask_first", False)),
            max_input_len=int(d.get("max_input_len", 128)),
        )


def format_input(template: TaskTemplate, instruction, x: TokenSeq) -> TokenSeq:
    """Deterministic scaffold insertion; injective in x for a fixed template."""
    instruction = tuple(int(t) for t in instruction)
    content = x.content
    if any(t == MASK for t in content):
        raise ValueError("content may not contain the mask token")
    if template.mask_first:
        ids = (BOS, *instruction, MASK, SEP, *content, EOS)
    else:
        ids = (BOS, *instruction, *content, SEP, MASK, EOS)
    if len(ids) > template.max_input_len:
        raise ValueError(
            f"formatted input of {len(ids)} tokens exceeds the {template.max_input_len} limit"
        )
    return TokenSeq(ids)


def strip_scaffold(z: TokenSeq) -> TokenSeq:
    """Drop scaffold ids from decoded content so the result can be templated."""
    return TokenSeq.from_content(t for t in z.content if not is_scaffold(t))


def family_tokens(label: int) -> tuple[int, int]:
    base = FIRST_CONTENT_ID + 2 * label
    return (base, base + 1)


def token_family(token_id: int, num_labels: int) -> int | None:
    if token_id < FIRST_CONTENT_ID:
        return None
    family = (token_id - FIRST_CONTENT_ID) // 2
    return family if family < num_labels else None


def majority_label(x: TokenSeq, num_labels: int) -> int:
    """Rule-based oracle classifier: the family with the most tokens wins."""
    counts = [0] * num_labels
    for t in x.content:
        fam = token_family(t, num_labels)
        if fam is not None:
            counts[fam] += 1
    return int(np.argmax(counts))


@dataclass(frozen=True)
class SyntheticTask:
    train: tuple[Example, ...]
    test: tuple[Example, ...]
    vocab_size: int
    num_labels: int
    verbalizer_ids: tuple[int, ...]
    template: TaskTemplate


def gen_synthetic_task(
    vocab_size: int, num_labels: int, n_train: int, n_test: int, seed: int
) -> SyntheticTask:
    """Balanced majority-vote dataset over `num_labels` synonym families.

    Sequences are 8..16 content tokens; the label family holds a strict
    plurality among family tokens, remaining slots are other families (each
    strictly below the majority count) and label-neutral distractors.
    """
    if vocab_size < 2 * num_labels + 4:
        raise ValueError(
            f"vocabulary of {vocab_size} too small: need >= {2 * num_labels + 4} "
            f"for {num_labels} synonym families plus scaffold tokens"
        )
    rng = np.random.default_rng(seed)
    distractors = list(range(FIRST_CONTENT_ID + 2 * num_labels, vocab_size))

    def make_example(uid: int, y: int) -> Example:
        n = int(rng.integers(8, 17))
        majority = int(rng.integers(2, n // 2 + 1))
        remaining = n - majority
        counts = {y: majority}
        for fam in range(num_labels):
            if fam == y:
                continue
            cap = min(majority - 1, remaining)
            c = int(rng.integers(0, cap + 1))
            counts[fam] = c
            remaining -= c
        if not distractors:
            counts[y] += remaining
            remaining = 0
        tokens: list[int] = []
        for fam, count in counts.items():
            pair = family_tokens(fam)
            tokens.extend(int(rng.choice(pair)) for _ in range(count))
        tokens.extend(int(rng.choice(distractors)) for _ in range(remaining))
        perm = rng.permutation(len(tokens))
        tokens = [tokens[i] for i in perm]
        return Example(uid=uid, x=TokenSeq.from_content(tokens), y=y)

    train = tuple(make_example(i, i % num_labels) for i in range(n_train))
    test = tuple(make_example(n_train + i, i % num_labels) for i in range(n_test))
    instruction = tuple(distractors[:3]) if len(distractors) >= 3 else ()
    return SyntheticTask(
        train=train,
        test=test,
        vocab_size=vocab_size,
        num_labels=num_labels,
        verbalizer_ids=tuple(family_tokens(y)[0] for y in range(num_labels)),
        template=TaskTemplate(instruction=instruction, mask_first=False, max_input_len=64),
    )


def gen_rewriter_corpus(examples, num_labels: int, seed: int) -> list[tuple[TokenSeq, TokenSeq]]:
    """Label-preserving rewrite targets: swap each family token for its synonym
    with probability 0.5, then shuffle within windows of 3 positions."""
    rng = np.random.default_rng(seed)
    pairs = []
    for ex in examples:
        tokens = list(ex.x.content)
        for i, t in enumerate(tokens):
            fam = token_family(t, num_labels)
            if fam is not None and rng.random() < 0.5:
                pair = family_tokens(fam)
                tokens[i] = pair[1] if t == pair[0] else pair[0]
        for start in range(0, len(tokens), 3):
            window = tokens[start : start + 3]
            perm = rng.permutation(len(window))
            tokens[start : start + 3] = [window[i] for i in perm]
        pairs.append((ex.x, TokenSeq.from_content(tokens)))
    return pairs


def load_template(path) -> TaskTemplate:
    with open(path, "r", encoding="utf-8") as f:
        return TaskTemplate.from_dict(json.load(f))


def save_template(path, template: TaskTemplate) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(template.to_dict(), f, indent=2)


def load_examples_jsonl(path) -> list[Example]:
    """Read {"text": "<space-separated token ids>", "label": int} records."""
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                ids = [int(t) for t in str(rec["text"]).split()]
                label = int(rec["label"])
            except (KeyError, ValueError) as exc:
                raise ValueError(f"bad dataset record on line {lineno + 1}") from exc
            examples.append(
                Example(uid=len(examples), x=TokenSeq.from_content(ids), y=label, text=rec["text"])
            )
    return examples


def save_examples_jsonl(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"text": " ".join(str(t) for t in ex.x.content), "label": ex.y}))
            f.write("\n")
