import numpy as np
import pytest

from riff.classifier import ClassifierConfig, ClassifierParams, TuningMode
from riff.policy import PolicyConfig, PolicyParams, TokenSeq


def tiny_policy(seed=0, vocab=4, max_len=4, embed=4, hidden=5, scale=0.6) -> PolicyParams:
    cfg = PolicyConfig(vocab_size=vocab, embed_dim=embed, hidden_dim=hidden, max_len=max_len)
    return PolicyParams.init_random(cfg, seed=seed, scale=scale)


def tiny_classifier(seed=0, vocab=8, labels=2, embed=4, prompt_len=0, mode=TuningMode.ALL,
                    scale=0.4) -> ClassifierParams:
    cfg = ClassifierConfig(
        vocab_size=vocab, num_labels=labels, embed_dim=embed,
        prompt_len=prompt_len, lora_rank=2, cls_hidden=5,
    )
    return ClassifierParams.init_random(cfg, mode, seed=seed, scale=scale)


def table_reward(table_seed: int):
    """Deterministic pseudo-random reward in (-2, 0], keyed by sequence ids."""

    def reward_fn(z: TokenSeq) -> float:
        rng = np.random.default_rng([table_seed, *z.ids])
        return float(-2.0 * rng.random())

    return reward_fn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
